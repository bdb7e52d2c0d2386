"""Symmetry-constrained attention-only transformer (SA-transformer).

Prediction at the final position N of a one-hot state sequence:

    pi = w_A x_N + w_B y_N + w_C sum_i A2_i x_i + w_D sum_i A2_i y_i,
    y_i = sum_{j<=i} A1_{ji} x_j              (layer-1 "buffer")

Positional tables are indexed by distance d = i - j >= 0, i.e. ``P[d]`` is P_{-d}.
Layer-1 attention is plain causal softmax, so query 1 sees only itself. Position 1 has
no predecessor and is therefore excluded from the layer-2 keys: the second layer
attends over i = 2..N.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .autodiff import DTYPE, NumericAbort, check_finite
from .markov_data import EnsembleSampler

EXPERTS = ("A", "B", "C", "D")


# ---------------------------------------------------------------- parameters

def _z(*shape, dtype=DTYPE):
    return torch.zeros(*shape, dtype=dtype, requires_grad=True)


def expert_weights(w_logits: torch.Tensor) -> torch.Tensor:
    """Softmax over (0, l_B, l_C, l_D)."""
    return torch.softmax(torch.cat([torch.zeros(1, dtype=w_logits.dtype), w_logits]), 0)


@dataclass
class FullSAParams:
    """Unconstrained content matrices M1 (C x C) and M2 (2C x 2C)."""
    M1: torch.Tensor
    M2: torch.Tensor
    P1: torch.Tensor
    P2: torch.Tensor
    w_logits: torch.Tensor

    @classmethod
    def zeros(cls, c: int, n: int, dtype=DTYPE):
        return cls(_z(c, c, dtype=dtype), _z(2 * c, 2 * c, dtype=dtype), _z(n, dtype=dtype), _z(n, dtype=dtype), _z(3, dtype=dtype))

    def tensors(self) -> List[torch.Tensor]:
        return [self.M1, self.M2, self.P1, self.P2, self.w_logits]

    def general(self):
        return self.M1, self.M2, self.P1, self.P2, self.w_logits

    @property
    def beta(self) -> float:
        c = self.M1.shape[0]
        return float(self.M2.detach()[c:, :c].diagonal().mean())

    @property
    def delta(self) -> float:
        return float(self.P1.detach()[1])

    def block_norms(self) -> Dict[str, float]:
        c = self.M1.shape[0]
        m = self.M2.detach()
        return {"M1": float(self.M1.detach().norm()), "M2_11": float(m[:c, :c].norm()), "M2_12": float(m[:c, c:].norm()),
                "M2_21": float(m[c:, :c].norm()), "M2_22": float(m[c:, c:].norm()), "P2": float(self.P2.detach().norm()),
                "M2_21_offdiag": float((m[c:, :c] - torch.diag(m[c:, :c].diagonal())).norm())}


@dataclass
class SAParams:
    """Block-identity form: one layer-1 content scalar, four layer-2 block scalars."""
    beta1_1: torch.Tensor
    beta2: torch.Tensor  # (beta_1, beta_2, beta_3, beta_4) of layer 2
    P1: torch.Tensor
    P2: torch.Tensor
    w_logits: torch.Tensor
    c: int = 10

    @classmethod
    def zeros(cls, c: int, n: int, dtype=DTYPE):
        return cls(_z((), dtype=dtype), _z(4, dtype=dtype), _z(n, dtype=dtype), _z(n, dtype=dtype), _z(3, dtype=dtype), c)

    def tensors(self) -> List[torch.Tensor]:
        return [self.beta1_1, self.beta2, self.P1, self.P2, self.w_logits]

    def general(self):
        eye = torch.eye(self.c, dtype=self.beta2.dtype)
        b = self.beta2
        M2 = torch.cat([torch.cat([b[0] * eye, b[1] * eye], 1), torch.cat([b[2] * eye, b[3] * eye], 1)], 0)
        return self.beta1_1 * eye, M2, self.P1, self.P2, self.w_logits

    @property
    def beta(self) -> float:
        return float(self.beta2.detach()[2])

    @property
    def delta(self) -> float:
        return float(self.P1.detach()[1])

    def block_norms(self) -> Dict[str, float]:
        b = self.beta2.detach()
        return {"beta1_1": float(self.beta1_1.detach()), "beta2_1": float(b[0]), "beta2_2": float(b[1]),
                "beta2_4": float(b[3]), "P2": float(self.P2.detach().norm())}


@dataclass
class ReducedParams:
    delta: torch.Tensor
    beta: torch.Tensor
    w_logits: torch.Tensor

    @classmethod
    def zeros(cls, dtype=DTYPE):
        return cls(_z((), dtype=dtype), _z((), dtype=dtype), _z(3, dtype=dtype))

    @classmethod
    def from_values(cls, delta: float, beta: float, weights: Sequence[float], dtype=DTYPE):
        """Expert weights given directly; all must be positive."""
        w = np.asarray(weights, dtype=np.float64)
        logits = np.log(w[1:] / w[0])
        return cls(torch.tensor(float(delta), dtype=dtype, requires_grad=True),
                   torch.tensor(float(beta), dtype=dtype, requires_grad=True),
                   torch.tensor(logits, dtype=dtype, requires_grad=True))

    def tensors(self) -> List[torch.Tensor]:
        return [self.delta, self.beta, self.w_logits]

    def to_sa(self, c: int, n: int) -> SAParams:
        p = SAParams.zeros(c, n, self.delta.dtype)
        with torch.no_grad():
            p.P1[1] = self.delta
            p.beta2[2] = self.beta
            p.w_logits.copy_(self.w_logits)
        return p

    def block_norms(self) -> Dict[str, float]:
        return {}


# ---------------------------------------------------------------- forward passes

def _one_hot(states: torch.Tensor, c: int, dtype) -> torch.Tensor:
    return torch.nn.functional.one_hot(states, c).to(dtype)


def layer1_buffers(states: torch.Tensor, M1: torch.Tensor, P1: torch.Tensor) -> torch.Tensor:
    """y_i = sum_j A1_{ji} x_j for every query i, shape (B, N, C).

    With one-hot inputs exp(M1[s_j, s_i] + P1[i-j]) factorizes, so the numerator for
    state c is exp(M1[c, s_i]) * (L @ X)[i, c] with L the causal Toeplitz kernel.
    """
    b, n = states.shape
    c = M1.shape[0]
    dtype = M1.dtype
    X = _one_hot(states, c, dtype)
    idx = torch.arange(n)
    dist = idx[:, None] - idx[None, :]
    pmax = P1.detach().max()
    mmax = M1.detach().max()
    kernel = torch.exp(P1 - pmax)[dist.clamp(min=0)] * (dist >= 0)
    Z = kernel @ X
    EM = torch.exp(M1 - mmax)
    num = EM[:, states].permute(1, 2, 0) * Z
    return num / num.sum(-1, keepdim=True)


def _mixture(X, Y, A2, w):
    """A2 covers keys 2..N."""
    return (w[0] * X[:, -1] + w[1] * Y[:, -1] + w[2] * torch.einsum("bi,bic->bc", A2, X[:, 1:])
            + w[3] * torch.einsum("bi,bic->bc", A2, Y[:, 1:]))


def general_forward(states: torch.Tensor, M1, M2, P1, P2, w_logits, return_parts: bool = False,
                    weights: Optional[torch.Tensor] = None):
    b, n = states.shape
    c = M1.shape[0]
    dtype = M1.dtype
    if n < 2:
        raise ValueError("need at least two context states")
    if P1.shape[0] < n or P2.shape[0] < n:
        raise ValueError(f"positional tables of length {P1.shape[0]} cannot cover N={n}")
    X = _one_hot(states, c, dtype)
    Y = layer1_buffers(states, M1, P1)
    H = torch.cat([X, Y], 2)
    scores = torch.einsum("bik,kl,bl->bi", H[:, 1:], M2, H[:, -1]) + P2[torch.arange(n - 2, -1, -1)]
    A2 = torch.softmax(scores, 1)
    w = expert_weights(w_logits) if weights is None else weights
    pi = _mixture(X, Y, A2, w)
    if return_parts:
        return pi, {"X": X, "Y": Y, "A2": A2, "w": w}
    return pi


def sa_forward(params, states, return_parts: bool = False, weights=None):
    """Final-position prediction (B, C) for SAParams or FullSAParams."""
    states = torch.as_tensor(np.asarray(states) if not torch.is_tensor(states) else states).long()
    if states.dim() == 1:
        states = states[None]
    return general_forward(states, *params.general(), return_parts=return_parts, weights=weights)


def reduced_buffers(states: torch.Tensor, delta: torch.Tensor, c: int) -> torch.Tensor:
    """Closed form A1_{ji} = ((e^d - 1)[j = i-1] + 1)/(i + e^d - 1) for i >= 2; y_1 = x_1."""
    b, n = states.shape
    dtype = delta.dtype
    X = _one_hot(states, c, dtype)
    cum = X[:, 1:].cumsum(1) + X[:, :1]
    prev = X[:, :-1]
    count = torch.arange(2, n + 1, dtype=dtype)
    # numerator and denominator scaled by e^{-delta} for large delta
    a = torch.exp(-delta)
    num = a * (cum - prev) + prev
    den = a * (count - 1.0) + 1.0
    return torch.cat([X[:, :1], num / den[None, :, None]], 1)


def reduced_forward(params: ReducedParams, states, return_parts: bool = False, weights=None):
    states = torch.as_tensor(np.asarray(states) if not torch.is_tensor(states) else states).long()
    if states.dim() == 1:
        states = states[None]
    c = int(states.max()) + 1 if not hasattr(params, "c") else params.c
    return reduced_forward_c(params, states, c, return_parts, weights)


def reduced_forward_c(params: ReducedParams, states: torch.Tensor, c: int, return_parts: bool = False, weights=None):
    dtype = params.delta.dtype
    X = _one_hot(states, c, dtype)
    Y = reduced_buffers(states, params.delta, c)
    match = torch.einsum("bic,bc->bi", Y[:, 1:], X[:, -1])
    A2 = torch.softmax(params.beta * match, 1)
    w = expert_weights(params.w_logits) if weights is None else weights
    pi = _mixture(X, Y, A2, w)
    if return_parts:
        return pi, {"X": X, "Y": Y, "A2": A2, "w": w}
    return pi


def expert_outputs(parts: dict) -> torch.Tensor:
    """The four expert distributions, shape (B, 4, C)."""
    X, Y, A2 = parts["X"], parts["Y"], parts["A2"]
    return torch.stack([X[:, -1], Y[:, -1], torch.einsum("bi,bic->bc", A2, X[:, 1:]),
                        torch.einsum("bi,bic->bc", A2, Y[:, 1:])], 1)


# ---------------------------------------------------------------- loss

def covered_mask(context: np.ndarray, target: np.ndarray) -> np.ndarray:
    """True where the target state occurs among context positions 2..N.

    The layer-2 experts mix only those positions, so uncovered targets can have zero model
    probability; such sequences are excluded from losses and references alike.
    """
    return (context[:, 1:] == target[:, None]).any(1)


def sa_loss(pi: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    p = pi.gather(1, target[:, None])[:, 0]
    lp = torch.log(p.clamp_min(1e-300))
    m = mask.to(pi.dtype)
    return -(lp * m).sum() / m.sum()


def reference_losses(context: np.ndarray, target: np.ndarray, c: int, mask: np.ndarray) -> Dict[str, float]:
    """Final-position 1-Gen (alpha'=1) and regularized 2-Gen losses on the masked sequences."""
    n = context.shape[1]
    n_t = (context == target[:, None]).sum(1)
    l1 = -np.log((n_t + 1.0) / (n + c))
    mu = context[:, -1]
    prev_is_mu = context[:, :-1] == mu[:, None]
    m = (prev_is_mu & (context[:, 1:] == target[:, None])).sum(1)
    l2 = -np.log((m + 1.0) / (prev_is_mu.sum(1) + c))
    return {"l1gen": float(l1[mask].mean()), "l2gen": float(l2[mask].mean())}


# ---------------------------------------------------------------- training

@dataclass
class SATrainConfig:
    n: int = 128
    batch: int = 256
    lr: float = 1.0
    iters: int = 3000
    seed: int = 0
    variant: str = "full"  # full | constrained | reduced
    data: str = "control"  # control | bias_ablated
    ablation_law: str = "stationary"  # resampling law for bias_ablated data
    c: int = 10
    alpha: float = 1.0
    eval_every: int = 1
    float32: bool = False


def make_params(cfg: SATrainConfig):
    dtype = torch.float32 if cfg.float32 else DTYPE
    if cfg.variant == "full":
        return FullSAParams.zeros(cfg.c, cfg.n, dtype)
    if cfg.variant == "constrained":
        return SAParams.zeros(cfg.c, cfg.n, dtype)
    if cfg.variant == "reduced":
        return ReducedParams.zeros(dtype)
    raise ValueError(f"unknown variant {cfg.variant}")


def _predict(params, states: torch.Tensor, c: int):
    if isinstance(params, ReducedParams):
        return reduced_forward_c(params, states, c)
    return general_forward(states, *params.general())


def _scalars(params) -> Dict[str, float]:
    if isinstance(params, ReducedParams):
        return {"beta": float(params.beta.detach()), "delta": float(params.delta.detach())}
    return {"beta": params.beta, "delta": params.delta}


def sa_train(cfg: SATrainConfig, params=None, callback=None) -> Dict[str, np.ndarray]:
    """Plain SGD on the final-position cross-entropy with fresh matrices every batch."""
    if cfg.data not in ("control", "bias_ablated"):
        raise ValueError(f"unknown data mode {cfg.data}")
    params = make_params(cfg) if params is None else params
    tensors = params.tensors()
    sampler = EnsembleSampler(cfg.c, cfg.alpha, cfg.seed)
    rows: List[Dict[str, float]] = []
    t0 = time.time()
    for it in range(cfg.iters + 1):
        _, _, s = sampler.batch(it, cfg.batch, cfg.n, ablate=cfg.data == "bias_ablated",
                                 law=cfg.ablation_law)
        context, target = s[:, :-1], s[:, -1]
        mask = covered_mask(context, target)
        st = torch.from_numpy(context)
        pi = _predict(params, st, cfg.c)
        loss = sa_loss(pi, torch.from_numpy(target), torch.from_numpy(mask))
        if not torch.isfinite(loss):
            raise NumericAbort(f"non-finite SA loss at iteration {it}")
        if it % cfg.eval_every == 0:
            w = expert_weights(params.w_logits).detach()
            row = {"iter": it, "loss": float(loss.detach())}
            row.update({f"w_{e}": float(v) for e, v in zip(EXPERTS, w)})
            row.update(_scalars(params))
            row.update(reference_losses(context, target, cfg.c, mask))
            row.update({f"norm_{k}": v for k, v in params.block_norms().items()})
            row["wall_time"] = time.time() - t0
            rows.append(row)
            if callback is not None:
                callback(row)
        if it == cfg.iters:
            break
        grads = torch.autograd.grad(loss, tensors)
        with torch.no_grad():
            for p, g in zip(tensors, grads):
                p.sub_(cfg.lr * g)
    for p in tensors:
        check_finite(p.detach(), "SA parameters")
    return {k: np.array([r[k] for r in rows]) for k in rows[0]}, params


# ---------------------------------------------------------------- transition analysis

def smooth(values: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; edges use the available samples."""
    v = np.asarray(values, dtype=np.float64)
    if window <= 1:
        return v.copy()
    c = np.concatenate([[0.0], np.cumsum(v)])
    half = window // 2
    lo = np.clip(np.arange(v.size) - half, 0, v.size)
    hi = np.clip(np.arange(v.size) - half + window, 0, v.size)
    return (c[hi] - c[lo]) / (hi - lo)


def detect_tau_2gen(iters: np.ndarray, loss: np.ndarray, l1gen: float, l2gen: float, window: int = 25) -> Optional[int]:
    """First logged iteration whose smoothed loss is below the L1/L2 midpoint; None if absent."""
    sm = smooth(loss, window)
    below = np.nonzero(sm < 0.5 * (l1gen + l2gen))[0]
    return None if below.size == 0 else int(np.asarray(iters)[below[0]])


@dataclass
class TransitionSummary:
    tau: Optional[int]
    plateau_len: int
    plateau_gap: float
    final_loss: float
    final_gap: float
    wA_at: float


def transition_summary(log: Dict[str, np.ndarray], plateau_tol: float = 0.02, plateau_window: int = 200,
                       final_window: int = 200, wA_iter: int = 500) -> TransitionSummary:
    """Plateau length near L1 before tau, loss level at the end relative to L2, w_A at ``wA_iter``.

    L1 and L2 are the run-wide Monte-Carlo averages of the per-batch reference losses.
    """
    it, loss = log["iter"], log["loss"]
    l1, l2 = float(np.mean(log["l1gen"])), float(np.mean(log["l2gen"]))
    tau = detect_tau_2gen(it, loss, l1, l2)
    sm = smooth(loss, plateau_window)
    stop = np.searchsorted(it, tau) if tau is not None else it.size
    close = np.abs(sm[:stop] - l1) <= plateau_tol
    best, run, gap = 0, 0, float("inf")
    for i, ok in enumerate(close):
        run = run + 1 if ok else 0
        best = max(best, run)
    if close.any():
        gap = float(np.abs(sm[:stop][close] - l1).max())
    stride = int(it[1] - it[0]) if it.size > 1 else 1
    final = float(loss[-max(1, final_window // stride):].mean())
    k = np.searchsorted(it, wA_iter)
    return TransitionSummary(tau, best * stride, gap, final, final - l2, float(log["w_A"][min(k, it.size - 1)]))


def early_time_exponents(iters: np.ndarray, trajectories: Dict[str, np.ndarray], t_lo: int, t_hi: int,
                         min_points: int = 10) -> Dict[str, float]:
    """Log-log slopes of each positive trajectory over iterations in [t_lo, t_hi]."""
    it = np.asarray(iters, dtype=np.float64)
    sel = (it >= t_lo) & (it <= t_hi)
    out = {}
    for name, v in trajectories.items():
        v = np.asarray(v, dtype=np.float64)
        ok = sel & (v > 0)
        if ok.sum() < min_points:
            import warnings
            warnings.warn(f"only {int(ok.sum())} pre-transition samples for {name}")
            out[name] = float("nan")
            continue
        out[name] = float(np.polyfit(np.log(it[ok]), np.log(v[ok]), 1)[0])
    return out


# ---------------------------------------------------------------- landscape

def project_simplex(v: torch.Tensor) -> torch.Tensor:
    """Euclidean projection of each row onto the probability simplex."""
    u, _ = torch.sort(v, dim=-1, descending=True)
    css = u.cumsum(-1) - 1.0
    k = torch.arange(1, v.shape[-1] + 1, dtype=v.dtype)
    cond = u - css / k > 0
    rho = cond.to(v.dtype).cumsum(-1).argmax(-1, keepdim=True)
    theta = css.gather(-1, rho) / (rho + 1).to(v.dtype)
    return (v - theta).clamp_min(0.0)


def optimize_weights(expert_p: torch.Tensor, steps: int = 500, lr: float = 0.1) -> tuple:
    """Minimize -mean log(E w) over the simplex for each grid point.

    ``expert_p``: (G, B, 4) expert probabilities of the realized targets.
    """
    g = expert_p.shape[0]
    w = torch.full((g, 4), 0.25, dtype=expert_p.dtype)
    for _ in range(steps):
        mix = torch.einsum("gbe,ge->gb", expert_p, w).clamp_min(1e-300)
        grad = -(expert_p / mix[..., None]).mean(1)
        w = project_simplex(w - lr * grad)
    mix = torch.einsum("gbe,ge->gb", expert_p, w).clamp_min(1e-300)
    return -torch.log(mix).mean(1), w


def landscape_scan(betas: Sequence[float], deltas: Sequence[float], states: np.ndarray, c: int,
                   steps: int = 500, lr: float = 0.1) -> List[Dict[str, float]]:
    """Loss surface over (beta, delta) with w optimized per point; ``states`` carry the target last."""
    context, target = states[:, :-1], states[:, -1]
    mask = covered_mask(context, target)
    context, target = torch.from_numpy(context[mask]), torch.from_numpy(target[mask])
    ep = []
    grid = [(b, d) for b in betas for d in deltas]
    with torch.no_grad():
        for b, d in grid:
            rp = ReducedParams.from_values(d, b, [0.25] * 4)
            _, parts = reduced_forward_c(rp, context, c, return_parts=True)
            e = expert_outputs(parts)
            ep.append(e.gather(2, target[:, None, None].expand(-1, 4, 1))[..., 0])
        loss, w = optimize_weights(torch.stack(ep), steps, lr)
    rows = []
    for (b, d), l, ww in zip(grid, loss, w):
        rows.append({"beta": float(b), "delta": float(d), "loss": float(l),
                     **{f"w_{e}": float(x) for e, x in zip(EXPERTS, ww)}})
    return rows


# ---------------------------------------------------------------- gradient at the 1-Gen point

def onegen_point_gradient(n: int, batches: int, batch: int, seed: int, c: int = 10, alpha: float = 1.0,
                          ablate: bool = False, law: str = "stationary") -> Dict[str, tuple]:
    """Monte-Carlo -dL/d(beta), -dL/d(delta) at w = (0, 1/3, 1/3, 1/3), beta = delta = 0.

    Returns mean and standard error over independent batches for each direction.
    """
    sampler = EnsembleSampler(c, alpha, seed)
    w = torch.tensor([0.0, 1 / 3, 1 / 3, 1 / 3], dtype=DTYPE)
    gb, gd = [], []
    for k in range(batches):
        _, _, s = sampler.batch(k, batch, n, ablate=ablate, law=law)
        context, target = s[:, :-1], s[:, -1]
        mask = covered_mask(context, target)
        rp = ReducedParams.zeros()
        pi = reduced_forward_c(rp, torch.from_numpy(context), c, weights=w)
        loss = sa_loss(pi, torch.from_numpy(target), torch.from_numpy(mask))
        d_delta, d_beta = torch.autograd.grad(loss, [rp.delta, rp.beta])
        gb.append(-float(d_beta))
        gd.append(-float(d_delta))
    gb, gd = np.array(gb), np.array(gd)
    return {"beta": (gb.mean(), gb.std(ddof=1) / math.sqrt(batches)),
            "delta": (gd.mean(), gd.std(ddof=1) / math.sqrt(batches))}
