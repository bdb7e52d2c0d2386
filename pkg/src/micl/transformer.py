"""Two-layer pre-norm transformer with rotary attention, residual caching and the two
K1* perturbations (gradient reweighting of previous-token attention, task injection).

Residual construction per position n:
    x0 = W_E x,  y1 = x0 + Att1(x0),  x1 = y1 + MLP1(y1),
    y2 = x1 + Att2(x1),  x2 = y2 + MLP2(y2),  logits = W_U^T x2
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
from torch import nn

from .autodiff import (DTYPE, AdamW, ContractError, NumericAbort, SGD, causal_mask, detach_scale, gelu,
                       layer_norm, ln_stats, log_checkpoint_schedule, save_checkpoint)
from .markov_data import EnsembleSampler, TaskSet, make_rng

ROTARY_BASE = 10000.0


# ---------------------------------------------------------------- rotary

def rotary_angles(positions: torch.Tensor, dim: int, dtype=DTYPE) -> torch.Tensor:
    if dim % 2:
        raise ContractError("rotary encoding needs an even head dimension")
    freq = ROTARY_BASE ** (-torch.arange(0, dim, 2, dtype=dtype) / dim)
    return positions.to(dtype)[:, None] * freq[None, :]


def apply_rotary(x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive coordinate pairs of the last axis by position-dependent angles."""
    ang = rotary_angles(positions, x.shape[-1], x.dtype)
    cos, sin = torch.cos(ang), torch.sin(ang)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], -1)
    return out.flatten(-2)


def rotary_scores(q: torch.Tensor, k: torch.Tensor, offset: int) -> torch.Tensor:
    """Score of a query ``offset`` positions after the key: (R(offset) q) . k / sqrt(D)."""
    d = q.shape[-1]
    rq = apply_rotary(q[None], torch.tensor([offset]))[0]
    return (rq * k).sum(-1) / math.sqrt(d)


# ---------------------------------------------------------------- model

@dataclass
class TransformerConfig:
    c: int = 10
    d: int = 64
    n_max: int = 256
    heads: int = 1
    positional: str = "rotary"  # rotary | relative
    mlp1: bool = True
    task_injection: int = 0  # number of task embeddings; 0 disables
    reweight: float = 1.0  # gradient factor on first-layer previous-token attention
    float32: bool = False

    @property
    def dtype(self):
        return torch.float32 if self.float32 else DTYPE


class Transformer(nn.Module):
    def __init__(self, cfg: TransformerConfig, seed: int = 0):
        super().__init__()
        if cfg.positional not in ("rotary", "relative"):
            raise ContractError(f"unknown positional scheme {cfg.positional}")
        if cfg.d % cfg.heads:
            raise ContractError("d must be divisible by heads")
        self.cfg = cfg
        d, c, dt = cfg.d, cfg.c, cfg.dtype
        g = torch.Generator().manual_seed(seed)

        def w(*shape, var):
            return nn.Parameter(torch.randn(*shape, generator=g, dtype=dt) * math.sqrt(var))

        # weights writing into the residual stream use variance 1/(4D), all others 1/D
        self.W_E = w(d, c, var=1.0 / d)
        for l in (1, 2):
            setattr(self, f"W_Q{l}", w(d, d, var=1.0 / d))
            setattr(self, f"W_K{l}", w(d, d, var=1.0 / d))
            setattr(self, f"W_V{l}", w(d, d, var=1.0 / (4 * d)))
            if l == 2 or cfg.mlp1:
                setattr(self, f"mlp_e{l}", w(4 * d, d, var=1.0 / d))
                setattr(self, f"mlp_u{l}", w(d, 4 * d, var=1.0 / (4 * d)))
            if cfg.positional == "relative":
                setattr(self, f"rel{l}", nn.Parameter(torch.zeros(cfg.n_max, dtype=dt)))
        # readout at variance 1/D^2: the un-normalized stream has squared norm ~D, so 1/D would
        # give O(1) logits at init; this keeps the initial output near-uniform
        self.W_U = w(d, c, var=1.0 / d ** 2)
        if cfg.task_injection:
            if not cfg.mlp1:
                raise ContractError("task injection feeds MLP1, which is disabled")
            self.task_emb = nn.Parameter(torch.zeros(cfg.task_injection, d, dtype=dt))

    # -- blocks
    def attention(self, layer: int, x: torch.Tensor, q_in: Optional[torch.Tensor] = None,
                  k_in: Optional[torch.Tensor] = None, v_in: Optional[torch.Tensor] = None):
        """Returns (output, A) with A[b, h, n, i] the weight query n gives key i.

        ``q_in``/``k_in``/``v_in`` are already layer-normed inputs overriding LN(x) per path.
        """
        cfg = self.cfg
        b, n, d = x.shape
        if n > cfg.n_max:
            raise ContractError(f"sequence length {n} exceeds n_max={cfg.n_max}")
        h = layer_norm(x) if (q_in is None or k_in is None or v_in is None) else None
        q = (h if q_in is None else q_in) @ getattr(self, f"W_Q{layer}").T
        k = (h if k_in is None else k_in) @ getattr(self, f"W_K{layer}").T
        v = (h if v_in is None else v_in) @ getattr(self, f"W_V{layer}").T
        H = cfg.heads
        dh = d // H
        q, k, v = (t.view(b, n, H, dh).transpose(1, 2) for t in (q, k, v))
        pos = torch.arange(n)
        if cfg.positional == "rotary":
            q, k = apply_rotary(q, pos), apply_rotary(k, pos)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if cfg.positional == "relative":
            dist = (pos[:, None] - pos[None, :]).clamp(min=0)
            scores = scores + getattr(self, f"rel{layer}")[dist]
        scores = scores.masked_fill(~causal_mask(n), float("-inf"))
        A = torch.softmax(scores, -1)
        if layer == 1 and cfg.reweight != 1.0 and n > 1:
            sub = torch.zeros(n, n, dtype=torch.bool)
            sub[torch.arange(1, n), torch.arange(n - 1)] = True
            A = torch.where(sub, detach_scale(A, cfg.reweight), A)
        out = (A @ v).transpose(1, 2).reshape(b, n, d)
        return out, A

    def mlp(self, layer: int, y: torch.Tensor, stats=None, extra: Optional[torch.Tensor] = None):
        inp = y if extra is None else y + extra
        h = layer_norm(inp, stats)
        return gelu(h @ getattr(self, f"mlp_e{layer}").T) @ getattr(self, f"mlp_u{layer}").T

    def embed(self, states: torch.Tensor) -> torch.Tensor:
        return self.W_E.T[states]

    def task_vectors(self, task_idx: Optional[torch.Tensor], b: int):
        if not self.cfg.task_injection:
            return None
        if task_idx is None:
            raise ContractError("task injection needs a task index per sequence")
        return self.task_emb[task_idx][:, None, :]

    def forward(self, states, task_idx=None, cache: bool = False, patch: Optional[Dict[str, torch.Tensor]] = None):
        """Per-position logits (B, N, C); optional cache and activation overwrite.

        ``patch`` may hold 'att1' or 'att2' tensors (B, N, D) replacing that block's output.
        """
        states = torch.as_tensor(states).long()
        if states.dim() == 1:
            states = states[None]
        b, n = states.shape
        x0 = self.embed(states)
        att1, A1 = self.attention(1, x0)
        if patch and "att1" in patch:
            att1 = patch["att1"]
        y1 = x0 + att1
        if self.cfg.mlp1:
            m1 = self.mlp(1, y1, extra=self.task_vectors(task_idx, b))
        else:
            m1 = torch.zeros_like(y1)
        x1 = y1 + m1
        att2, A2 = self.attention(2, x1)
        if patch and "att2" in patch:
            att2 = patch["att2"]
        y2 = x1 + att2
        m2 = self.mlp(2, y2)
        x2 = y2 + m2
        logits = x2 @ self.W_U
        if not cache:
            return logits
        c = {"x0": x0, "att1": att1, "mlp1": m1, "att2": att2, "mlp2": m2, "x1": x1, "x2": x2,
             "logits": logits, "A1": A1[:, 0] if self.cfg.heads == 1 else A1,
             "A2": A2[:, 0] if self.cfg.heads == 1 else A2}
        if not self.cfg.mlp1:
            del c["mlp1"]
        return logits, c

    def probs(self, states, task_idx=None) -> torch.Tensor:
        return torch.softmax(self.forward(states, task_idx), -1)

    def state(self) -> Dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.named_parameters()}


def forward_nonauto_variant(model: Transformer, states) -> torch.Tensor:
    """Final-position distribution of the MLP1-free, relative-bias variant."""
    if model.cfg.mlp1 or model.cfg.positional != "relative":
        raise ContractError("model is not configured as the non-autoregressive variant")
    return torch.softmax(model(states)[:, -1], -1)


def apply_gradient_reweight(model: Transformer, w: float) -> Transformer:
    if not 0.0 <= w <= 1.0:
        raise ContractError("reweight factor must lie in [0, 1]")
    model.cfg.reweight = w
    return model


def enable_task_injection(model: Transformer, k: int) -> Transformer:
    if not model.cfg.mlp1:
        raise ContractError("task injection feeds MLP1, which is disabled")
    model.cfg.task_injection = k
    model.task_emb = nn.Parameter(torch.zeros(k, model.cfg.d, dtype=model.cfg.dtype))
    return model


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    k: Optional[int] = 8  # None: fresh matrices every batch
    task_seed: int = 0
    c: int = 10
    alpha: float = 1.0
    n: int = 256
    batch: int = 128
    iters: int = 1000
    lr: float = 1e-3
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 1e-3
    optimizer: str = "adamw"  # adamw | sgd
    momentum: float = 0.9
    objective: str = "autoregressive"  # autoregressive | final
    seed: int = 0
    eval_every: int = 50
    eval_batch: int = 256
    checkpoints: bool = False


class Batcher:
    """Deterministic training/evaluation batches keyed by (seed, purpose, step)."""

    def __init__(self, cfg: TrainConfig, tasks: Optional[TaskSet]):
        self.cfg, self.tasks = cfg, tasks
        self.fresh = EnsembleSampler(cfg.c, cfg.alpha, cfg.seed * 1000 + 1)
        self.ood = EnsembleSampler(cfg.c, cfg.alpha, cfg.seed * 1000 + 2)

    def train(self, step: int, batch: Optional[int] = None):
        b = batch or self.cfg.batch
        if self.tasks is None:
            _, _, s = self.fresh.batch(step, b, self.cfg.n, target=True)
            return s, None
        return self.tasks.sample(b, self.cfg.n + 1, make_rng(self.cfg.seed, 101, step))

    def train_eval(self, step: int):
        b = self.cfg.eval_batch
        if self.tasks is None:
            _, _, s = self.fresh.batch(10**9 + step, b, self.cfg.n, target=True)
            return s, None
        return self.tasks.sample(b, self.cfg.n + 1, make_rng(self.cfg.seed, 102, step))

    def gen_eval(self, step: int):
        _, _, s = self.ood.batch(step, self.cfg.eval_batch, self.cfg.n, target=True)
        return s, None


def sequence_loss(model: Transformer, s: np.ndarray, task_idx, objective: str) -> torch.Tensor:
    st = torch.from_numpy(s)
    ti = None if task_idx is None or not model.cfg.task_injection else torch.as_tensor(task_idx)
    logits = model(st[:, :-1], ti)
    lp = torch.log_softmax(logits, -1)
    if objective == "final":
        return -lp[:, -1].gather(-1, st[:, -1:]).mean()
    return -lp.gather(-1, st[:, 1:, None]).mean()


def train(model: Transformer, cfg: TrainConfig, tasks: Optional[TaskSet] = None, run_dir: Optional[Path] = None,
          readouts: bool = True, callback=None) -> List[Dict[str, float]]:
    """Train in place; returns the metric log rows."""
    from . import diagnostics  # local import to keep module layering flat

    torch.manual_seed(cfg.seed)
    params = [p for p in model.parameters()]
    if cfg.optimizer == "adamw":
        opt = AdamW(params, cfg.lr, cfg.betas, cfg.weight_decay)
    elif cfg.optimizer == "sgd":
        opt = SGD(params, cfg.lr, cfg.momentum)
    else:
        raise ContractError(f"unknown optimizer {cfg.optimizer}")
    if cfg.k is not None and tasks is None:
        raise ContractError("finite-k training needs a task set")
    batches = Batcher(cfg, tasks)
    schedule = set(log_checkpoint_schedule(cfg.iters)) if cfg.checkpoints and run_dir else set()
    if run_dir is not None:
        (Path(run_dir) / "checkpoints").mkdir(parents=True, exist_ok=True)
    rows: List[Dict[str, float]] = []
    t0 = time.time()
    for it in range(cfg.iters + 1):
        if it % cfg.eval_every == 0 or it == cfg.iters:
            rows.append(evaluate(model, cfg, batches, it, time.time() - t0, readouts))
            if callback is not None:
                callback(rows[-1])
        if it in schedule:
            save_checkpoint(Path(run_dir) / "checkpoints" / f"iter_{it:08d}.micl", model.state(), {"iter": it})
        if it == cfg.iters:
            break
        s, ti = batches.train(it)
        loss = sequence_loss(model, s, ti, cfg.objective)
        if not torch.isfinite(loss):
            if run_dir:
                save_checkpoint(Path(run_dir) / "checkpoints" / f"abort_{it:08d}.micl", model.state(), {"iter": it})
            raise NumericAbort(f"non-finite training loss at iteration {it}")
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
        opt.step(grads)
    return rows


@torch.no_grad()
def evaluate(model: Transformer, cfg: TrainConfig, batches: Batcher, it: int, wall: float,
             readouts: bool = True) -> Dict[str, float]:
    from . import diagnostics

    s, ti = batches.train_eval(it)
    row = {"iter": it, "loss_train": float(sequence_loss(model, s, ti, cfg.objective))}
    g, _ = batches.gen_eval(it)
    if model.cfg.task_injection:
        row["loss_gen"] = float("nan")
    else:
        row["loss_gen"] = float(sequence_loss(model, g, None, cfg.objective))
    if readouts:
        ti_t = None if ti is None or not model.cfg.task_injection else torch.as_tensor(ti)
        _, cache = model(torch.from_numpy(s[:, :-1]), ti_t, cache=True)
        st = s[:, :-1]
        row["phi_delta1"] = diagnostics.phi_delta_from_attention(cache["A1"])
        row["phi_beta2"] = diagnostics.phi_beta_from_attention(cache["A2"], st)
        row["nA1"] = diagnostics.n_attend_from_attention(cache["A1"])
        row["nA2"] = diagnostics.n_attend_from_attention(cache["A2"])
    row["wall_time"] = wall
    return row


METRIC_FIELDS = ["iter", "loss_train", "loss_gen", "phi_delta1", "phi_beta2", "nA1", "nA2", "wall_time"]


def write_metrics(path: Path, rows: List[Dict[str, float]]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: r.get(k, "") for k in METRIC_FIELDS})
