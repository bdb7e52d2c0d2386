"""Differentiation core: primitives, single-use backward, optimizers and MICL1 checkpoints.

Reverse-mode recording is delegated to torch autograd in float64; this module pins the
primitive definitions the models use and the contracts around them.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch

DTYPE = torch.float64
LN_EPS = 1e-5


class ContractError(RuntimeError):
    pass


class NumericAbort(ArithmeticError):
    pass


# ---------------------------------------------------------------- primitives

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ContractError(f"matmul shape mismatch {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a + b


def scale(a: torch.Tensor, s: float) -> torch.Tensor:
    return a * s


def concat(ts: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    return torch.cat(list(ts), dim)


def row_gather(table: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return table[idx]


def mean(a: torch.Tensor, dim=None) -> torch.Tensor:
    return a.mean() if dim is None else a.mean(dim)


def log(a: torch.Tensor) -> torch.Tensor:
    return torch.log(a)


def layer_norm(x: torch.Tensor, stats: Optional[tuple] = None, eps: float = LN_EPS) -> torch.Tensor:
    """(x - mean)/sqrt(var + eps) over the last axis, no gain or bias.

    With ``stats=(mu, var)`` the map is affine in x and uses the supplied statistics.
    """
    if stats is None:
        stats = ln_stats(x)
    mu, var = stats
    return (x - mu) / torch.sqrt(var + eps)


def ln_stats(x: torch.Tensor) -> tuple:
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return mu, var


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def causal_mask(n: int, device=None) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool, device=device).tril()


def masked_softmax(scores: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Softmax over the last axis; positions with mask False get weight 0."""
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, -1)


def causal_softmax(scores: torch.Tensor) -> torch.Tensor:
    return masked_softmax(scores, causal_mask(scores.shape[-1], scores.device))


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean of -log softmax(logits)[target] over all leading positions."""
    lp = torch.log_softmax(logits, -1)
    return -lp.gather(-1, targets.unsqueeze(-1)).mean()


def detach_scale(t: torch.Tensor, w: float) -> torch.Tensor:
    """Bit-identical forward value; gradient scaled by w: stop_grad(t) + w * (t - stop_grad(t))."""
    if not 0.0 <= w <= 1.0:
        raise ContractError("detach_scale factor must lie in [0, 1]")
    if w == 1.0:
        return t
    d = t.detach()
    return d + w * (t - d)


def check_finite(t: torch.Tensor, where: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericAbort(f"non-finite values in {where}")


# ---------------------------------------------------------------- backward

def backward(loss: torch.Tensor, params: Iterable[torch.Tensor]) -> Dict[int, torch.Tensor]:
    """Gradient of a scalar loss w.r.t. ``params`` (keyed by position).

    The recorded graph is single use: a second call on the same loss raises.
    """
    if loss.dim() != 0:
        raise ContractError("backward needs a scalar loss")
    if not loss.requires_grad:
        raise ContractError("loss is detached from the recorded graph")
    if getattr(loss, "_micl_consumed", False):
        raise ContractError("graph already consumed; re-run the forward pass")
    params = list(params)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    loss._micl_consumed = True
    return {i: (torch.zeros_like(p) if g is None else g) for i, (p, g) in enumerate(zip(params, grads))}


def finite_difference_check(fn: Callable[[], torch.Tensor], params: List[torch.Tensor], n_coords: int = 50,
                            h: float = 1e-5, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between autograd and central differences over random coordinates."""
    loss = fn()
    grads = backward(loss, params)
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_coords):
            pi = int(rng.choice(len(params), p=sizes / sizes.sum()))
            j = int(rng.integers(sizes[pi]))
            flat = params[pi].view(-1)
            old = flat[j].item()
            flat[j] = old + h
            fp = fn().item()
            flat[j] = old - h
            fm = fn().item()
            flat[j] = old
            fd = (fp - fm) / (2 * h)
            ad = grads[pi].reshape(-1)[j].item()
            worst = max(worst, abs(ad - fd) / max(abs(ad), abs(fd), floor))
    return worst


# ---------------------------------------------------------------- optimizers

def adamw_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: dict, lr: float = 1e-3,
               betas=(0.9, 0.95), weight_decay: float = 1e-3, eps: float = 1e-8) -> None:
    """In-place AdamW with decoupled decay and bias-corrected moments."""
    b1, b2 = betas
    if not state:
        state["step"] = 0
        state["m"] = [torch.zeros_like(p) for p in params]
        state["v"] = [torch.zeros_like(p) for p in params]
    state["step"] += 1
    t = state["step"]
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            if weight_decay:
                p.mul_(1 - lr * weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.addcdiv_(m / c1, (v / c2).sqrt_().add_(eps), value=-lr)


def sgd_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], lr: float, momentum: float = 0.0,
             state: Optional[dict] = None) -> None:
    """Heavy-ball SGD: v <- m v + g; p <- p - lr v."""
    if lr <= 0 or not 0.0 <= momentum < 1.0:
        raise ContractError("need lr > 0 and 0 <= momentum < 1")
    with torch.no_grad():
        if momentum == 0.0:
            for p, g in zip(params, grads):
                p.sub_(g, alpha=lr)
            return
        if state is None:
            raise ContractError("momentum needs a state dict")
        if not state:
            state["v"] = [torch.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, state["v"]):
            v.mul_(momentum).add_(g)
            p.sub_(v, alpha=lr)


class AdamW:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.95), weight_decay=1e-3, eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.weight_decay, self.eps = lr, betas, weight_decay, eps
        self.state: dict = {}

    def step(self, grads):
        adamw_step(self.params, grads, self.state, self.lr, self.betas, self.weight_decay, self.eps)


class SGD:
    def __init__(self, params, lr=1.0, momentum=0.0):
        self.params = list(params)
        self.lr, self.momentum = lr, momentum
        self.state: dict = {}

    def step(self, grads):
        sgd_step(self.params, grads, self.lr, self.momentum, self.state)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MICL1"
_DTYPES = {torch.float64: "<f8", torch.float32: "<f4"}


def save_checkpoint(path: str | Path, tensors: Dict[str, torch.Tensor], meta: Optional[dict] = None) -> None:
    """MAGIC, u64 header length, JSON header, then the little-endian payload."""
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        dt = _DTYPES.get(t.dtype)
        if dt is None:
            raise ContractError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.detach().cpu().contiguous().numpy().astype(dt).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": dt, "byte_offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str | Path):
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ContractError(f"{path} is not a MICL1 checkpoint")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start: start + hlen])
    base = start + hlen
    out = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(data, dtype=dt, count=count, offset=base + e["byte_offset"]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(dt.newbyteorder("=")).copy())
    return out, header["meta"]


def log_checkpoint_schedule(iters: int, per_decade: int = 20) -> List[int]:
    """Distinct integer iterations 1..iters spaced evenly in log10, ``per_decade`` per decade."""
    if iters < 1:
        return []
    n = int(math.floor(per_decade * math.log10(iters))) + 1
    pts = {int(round(10 ** (i / per_decade))) for i in range(n)}
    pts.add(iters)
    return sorted(p for p in pts if 1 <= p <= iters)
