"""Bayes predictors (1-Gen, 2-Gen, 1-Mem, 2-Mem) and the loss / divergence metrics.

Batched functions take ``states`` of shape (B, L) and return (B, L, C): row ``n`` is the
prediction for s_{n+2} after observing the prefix s_1..s_{n+1} (0-based n).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

import numpy as np
from scipy.special import logsumexp

from .markov_data import TaskSet, build_task_set, make_rng

LOG_FLOOR = 1e-12
KINDS = ("1-Gen", "2-Gen", "1-Mem", "2-Mem")


def _as_batch(states) -> np.ndarray:
    s = np.asarray(getattr(states, "states", states), dtype=np.int64)
    return s[None] if s.ndim == 1 else s


# ---------------------------------------------------------------- generalizers

def onegen_all(states, c: int, alpha_prime: float = 1.0) -> np.ndarray:
    s = _as_batch(states)
    counts = np.cumsum(np.eye(c)[s], axis=1)
    n = np.arange(1, s.shape[1] + 1)[None, :, None]
    return (counts + alpha_prime) / (n + c * alpha_prime)


def pair_counts(states, c: int) -> np.ndarray:
    """Cumulative transition counts: out[b, n, mu, tau] = #{i <= n : s_{i-1} = mu, s_i = tau}."""
    s = _as_batch(states)
    b, L = s.shape
    out = np.zeros((b, L, c * c), dtype=np.int32)
    if L > 1:
        ids = s[:, :-1] * c + s[:, 1:]
        np.put_along_axis(out[:, 1:], ids[..., None], 1, axis=2)
        np.cumsum(out, axis=1, out=out)
    return out.reshape(b, L, c, c)


def twogen_all(states, c: int, regularized: bool = True) -> np.ndarray:
    """(m_{tau mu} + 1)/(n_mu + C), or m/n when ``regularized`` is False (NaN where n_mu = 0)."""
    s = _as_batch(states)
    b, L = s.shape
    out = np.empty((b, L, c))
    chunk = max(1, 2_000_000 // (L * c * c))
    for lo in range(0, b, chunk):
        sl = s[lo:lo + chunk]
        m = pair_counts(sl, c)
        rows = np.take_along_axis(m, sl[:, :, None, None], axis=2)[:, :, 0, :].astype(np.float64)
        n_mu = rows.sum(-1, keepdims=True)
        if regularized:
            out[lo:lo + chunk] = (rows + 1.0) / (n_mu + c)
        else:
            with np.errstate(invalid="ignore", divide="ignore"):
                out[lo:lo + chunk] = np.where(n_mu > 0, rows / np.maximum(n_mu, 1), np.nan)
    return out


# ---------------------------------------------------------------- memorizers

def log_posteriors(states, tasks: TaskSet, order: int) -> np.ndarray:
    """Normalized log posterior over the K members after each prefix, shape (B, L, K)."""
    s = _as_batch(states)
    logp = np.log(tasks.stationary)  # (K, C)
    if order == 1:
        factors = logp[:, s].transpose(1, 2, 0)
    elif order == 2:
        logt = np.log(tasks.entries)  # (K, tau, mu)
        factors = np.empty(s.shape + (tasks.k,))
        factors[:, 0] = logp[:, s[:, 0]].T
        factors[:, 1:] = logt[:, s[:, 1:], s[:, :-1]].transpose(1, 2, 0)
    else:
        raise ValueError("order must be 1 or 2")
    ll = np.cumsum(factors, axis=1)
    return ll - logsumexp(ll, axis=-1, keepdims=True)


def mem_all(states, tasks: TaskSet, order: int, posterior_from=None) -> np.ndarray:
    """Memorizing predictor; ``posterior_from`` supplies the sequences defining the posterior
    (hybrid predictors), while the current state always comes from ``states``."""
    s = _as_batch(states)
    src = s if posterior_from is None else _as_batch(posterior_from)
    post = np.exp(log_posteriors(src, tasks, order))
    out = np.zeros(s.shape + (tasks.c,))
    for mu in range(tasks.c):
        mask = s == mu
        if mask.any():
            out[mask] = post[mask] @ tasks.entries[:, :, mu]
    return out


def predict_all(kind: str, states, c: int, tasks: Optional[TaskSet] = None, alpha_prime: float = 1.0) -> np.ndarray:
    if kind == "1-Gen":
        return onegen_all(states, c, alpha_prime)
    if kind == "2-Gen":
        return twogen_all(states, c)
    if kind in ("1-Mem", "2-Mem"):
        if tasks is None or tasks.k < 1:
            raise ValueError("memorizing predictors need a task set")
        return mem_all(states, tasks, 1 if kind == "1-Mem" else 2)
    raise ValueError(f"unknown predictor {kind}")


# single-prefix conveniences

def predict_1gen(prefix, c: int, alpha_prime: float = 1.0) -> np.ndarray:
    s = np.asarray(getattr(prefix, "states", prefix), dtype=np.int64)
    if s.size == 0:
        return np.full(c, 1.0 / c)
    return onegen_all(s, c, alpha_prime)[0, -1]


def predict_2gen(prefix, c: int, regularized: bool = True) -> np.ndarray:
    return twogen_all(prefix, c, regularized)[0, -1]


def predict_1mem(prefix, tasks: TaskSet) -> np.ndarray:
    return mem_all(prefix, tasks, 1)[0, -1]


def predict_2mem(prefix, tasks: TaskSet) -> np.ndarray:
    return mem_all(prefix, tasks, 2)[0, -1]


# ---------------------------------------------------------------- metrics

@dataclass
class LossResult:
    per_sequence: np.ndarray
    floored: bool

    @property
    def mean(self) -> float:
        return float(self.per_sequence.mean())

    @property
    def sem(self) -> float:
        n = self.per_sequence.size
        return float(self.per_sequence.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")


def position_log_probs(probs: np.ndarray, states) -> tuple[np.ndarray, bool]:
    """log probs[:, n, s_{n+1}] for n = 0..L-2 with the log floor; returns (values, floored)."""
    s = _as_batch(states)
    p = np.take_along_axis(probs[:, : s.shape[1] - 1], s[:, 1:, None], axis=2)[..., 0]
    floored = bool((p < LOG_FLOOR).any())
    return np.log(np.maximum(p, LOG_FLOOR)), floored


def autoregressive_loss(probs: np.ndarray, states) -> LossResult:
    """-(1/N) sum_n log pred(s_{n+1} | S_n) per sequence, N = length - 1."""
    s = _as_batch(states)
    if s.shape[1] < 2:
        raise ValueError("autoregressive loss needs length >= 2")
    lp, floored = position_log_probs(probs, s)
    return LossResult(-lp.mean(1), floored)


def kl_positions(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p || q) along the last axis with 0 log 0 = 0 and the floor on q."""
    p = np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), LOG_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(q)), 0.0)
    return t.sum(-1)


def kl_sequence(pred: np.ndarray, model: np.ndarray) -> np.ndarray:
    """Position-averaged KL(pred || model) per sequence; inputs (B, N, C)."""
    if pred.shape != model.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {model.shape}")
    return kl_positions(pred, model).mean(-1)


def divergence_D(model_train: np.ndarray, pred_train: np.ndarray,
                 model_ood: np.ndarray, pred_ood: np.ndarray) -> float:
    if model_train.size == 0 or model_ood.size == 0:
        raise ValueError("both batches must be non-empty")
    return 0.5 * float(kl_sequence(pred_train, model_train).mean()) + 0.5 * float(kl_sequence(pred_ood, model_ood).mean())


def predictor_loss_scan(kinds: Iterable[str], k_grid: Iterable[int], n_grid: Iterable[int], trials: int,
                        seed: int = 0, c: int = 10, alpha: float = 1.0, alpha_prime: float = 1.0) -> List[Dict]:
    """Rows {predictor, k, n, loss_mean, loss_sem, trials, seed}.

    ``predictor`` rows give the fixed-length loss at context length n; rows suffixed
    ``/ar`` give the autoregressive loss averaged over positions 1..max(n_grid).
    """
    kinds, k_grid, n_grid = list(kinds), list(k_grid), sorted(n_grid)
    if not kinds or not k_grid or not n_grid:
        raise ValueError("grids must be non-empty")
    n_max = n_grid[-1]
    rows = []
    for k in k_grid:
        tasks = build_task_set(seed, k, c, alpha)
        states, _ = tasks.sample(trials, n_max + 1, make_rng(seed, 11, k))
        for kind in kinds:
            probs = predict_all(kind, states, c, tasks, alpha_prime)
            lp, _ = position_log_probs(probs, states)
            ar = -lp.mean(1)
            rows.append(dict(predictor=f"{kind}/ar", k=k, n=n_max, loss_mean=float(ar.mean()),
                             loss_sem=float(ar.std(ddof=1) / np.sqrt(trials)), trials=trials, seed=seed))
            for n in n_grid:
                v = -lp[:, n - 1]
                rows.append(dict(predictor=kind, k=k, n=n, loss_mean=float(v.mean()),
                                 loss_sem=float(v.std(ddof=1) / np.sqrt(trials)), trials=trials, seed=seed))
    return rows
