"""Behavioral and mechanistic readouts, memorization scores, and the K1*/K2* procedures."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.optimize import minimize_scalar

from . import bayes
from .markov_data import EnsembleSampler, TaskSet, make_rng

PREDICTORS = ("1-Gen", "2-Gen", "1-Mem", "2-Mem")
PHI_STAR = 0.45
MEM_EPS = 1e-3


# ---------------------------------------------------------------- attention order parameters

def _np(a) -> np.ndarray:
    return a.detach().cpu().numpy() if torch.is_tensor(a) else np.asarray(a)


def phi_delta_from_attention(A) -> float:
    """Mean previous-position weight: <1/(N-1) sum_{i>=2} A_{i,i-1}>, A of shape (B, N, N)."""
    A = _np(A)
    if A.shape[-1] < 2:
        return 0.0
    return float(np.diagonal(A, offset=-1, axis1=-2, axis2=-1).mean())


def phi_beta_from_attention(A, states) -> float:
    """<1/N sum_{n>=2} sum_{2<=i<=n} [s_n = s_{i-1}] A_{ni}> with rows n as queries."""
    A = _np(A)
    s = np.asarray(states)
    b, n = s.shape
    match = np.zeros((b, n, n), dtype=bool)
    match[:, :, 1:] = s[:, :, None] == s[:, None, :-1]
    match &= np.tril(np.ones((n, n), dtype=bool))[None]
    match[:, 0] = False
    return float((A * match).sum((1, 2)).mean() / n)


def n_attend_from_attention(A) -> float:
    """exp of the batch-mean entropy of the final attention row (0 log 0 = 0)."""
    row = _np(A)[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(row > 0, row * np.log(np.where(row > 0, row, 1.0)), 0.0).sum(-1)
    return float(math.exp(h.mean()))


def _attention(model, states, layer: int, task_idx=None):
    st = torch.as_tensor(np.asarray(states)).long()
    ti = None if task_idx is None or not model.cfg.task_injection else torch.as_tensor(task_idx)
    with torch.no_grad():
        _, cache = model(st, ti, cache=True)
    return cache[f"A{layer}"]


def phi_delta(model, states, layer: int = 1, task_idx=None) -> float:
    return phi_delta_from_attention(_attention(model, states, layer, task_idx))


def phi_beta(model, states, layer: int = 2, task_idx=None) -> float:
    return phi_beta_from_attention(_attention(model, states, layer, task_idx), states)


def n_attend(model, states, layer: int, task_idx=None) -> float:
    return n_attend_from_attention(_attention(model, states, layer, task_idx))


@dataclass
class ReadoutRecord:
    iter: int
    phi_delta: Tuple[float, float]
    phi_beta: Tuple[float, float]
    n_attend: Tuple[float, float]
    divergence: Dict[str, float] = field(default_factory=dict)
    loss_train: float = float("nan")
    loss_gen: float = float("nan")


def readout(model, states, it: int = 0, task_idx=None) -> ReadoutRecord:
    st = torch.as_tensor(np.asarray(states)).long()
    ti = None if task_idx is None or not model.cfg.task_injection else torch.as_tensor(task_idx)
    with torch.no_grad():
        _, cache = model(st, ti, cache=True)
    A1, A2 = cache["A1"], cache["A2"]
    return ReadoutRecord(it, (phi_delta_from_attention(A1), phi_delta_from_attention(A2)),
                         (phi_beta_from_attention(A1, states), phi_beta_from_attention(A2, states)),
                         (n_attend_from_attention(A1), n_attend_from_attention(A2)))


# ---------------------------------------------------------------- behavioral readouts

def model_probs(model, states, task_idx=None) -> np.ndarray:
    """Per-position next-state probabilities (B, L, C) from a transformer, minimal model or callable."""
    st = torch.as_tensor(np.asarray(states)).long()
    if isinstance(model, torch.nn.Module):
        with torch.no_grad():
            if getattr(getattr(model, "cfg", None), "task_injection", 0):
                logits = model(st, torch.as_tensor(task_idx))
            else:
                logits = model(st)
        return torch.softmax(logits, -1).double().numpy()
    return np.asarray(model(np.asarray(states), task_idx), dtype=np.float64)


def behavioral_grid(checkpoints: Iterable[Tuple[int, object]], tasks: TaskSet, n: int,
                    train_batch: Optional[int] = None, ood_batch: int = 2048, seed: int = 0,
                    predictors: Sequence[str] = PREDICTORS) -> List[Dict]:
    """Rows {K, iter, metric, value}: divergence D(predictor, model) plus train/ood losses.

    The training half uses 8K sequences by default, the out-of-distribution half ``ood_batch``.
    """
    c = tasks.c
    tb = 8 * tasks.k if train_batch is None else train_batch
    tr, ti = tasks.sample(tb, n + 1, make_rng(seed, 301))
    _, _, ood = EnsembleSampler(c, tasks.alpha, seed + 7919).batch(0, ood_batch, n)
    ctx_tr, ctx_ood = tr[:, :-1], ood[:, :-1]
    preds_tr = {k: bayes.predict_all(k, ctx_tr, c, tasks) for k in predictors}
    preds_ood = {k: bayes.predict_all(k, ctx_ood, c, tasks) for k in predictors}
    rows = []
    for it, model in checkpoints:
        m_tr = model_probs(model, ctx_tr, ti)
        injected = getattr(getattr(model, "cfg", None), "task_injection", 0)
        m_ood = None if injected else model_probs(model, ctx_ood)
        for k in predictors:
            if m_ood is None:
                v = float(bayes.kl_sequence(preds_tr[k], m_tr).mean())
            else:
                v = bayes.divergence_D(m_tr, preds_tr[k], m_ood, preds_ood[k])
            rows.append({"K": tasks.k, "iter": it, "metric": f"D_{k}", "value": v})
        rows.append({"K": tasks.k, "iter": it, "metric": "loss_train",
                     "value": float(bayes.autoregressive_loss(_extend(m_tr), tr).mean)})
        if m_ood is not None:
            rows.append({"K": tasks.k, "iter": it, "metric": "loss_gen",
                         "value": float(bayes.autoregressive_loss(_extend(m_ood), ood).mean)})
    return rows


def _extend(p: np.ndarray) -> np.ndarray:
    """Pad a (B, N, C) prediction array so position_log_probs sees N + 1 states."""
    return np.concatenate([p, p[:, -1:]], 1)


# ---------------------------------------------------------------- memorization

@dataclass
class MemorizationReport:
    scores: np.ndarray  # Delta^k per task
    eps: float
    k: int
    iter: int = 0

    def fraction(self, eps: Optional[float] = None, strict: bool = True) -> float:
        """Share of tasks with Delta^k < -eps (strict) or Delta^k < +eps."""
        e = self.eps if eps is None else eps
        thr = -e if strict else e
        return float(np.mean(self.scores < thr))

    @property
    def fraction_strict(self) -> float:
        return self.fraction(strict=True)

    @property
    def fraction_loose(self) -> float:
        return self.fraction(strict=False)


def memorization_scores(model, tasks: TaskSet, n: int, per_task: int = 64, seed: int = 0,
                        eps: float = MEM_EPS, it: int = 0) -> MemorizationReport:
    """Delta^k = mean over task-k sequences of (L_model - L_2-Gen), autoregressive losses."""
    scores = np.zeros(tasks.k)
    for k in range(tasks.k):
        s, ti = tasks.sample(per_task, n + 1, make_rng(seed, 401, k), tasks=np.full(per_task, k))
        ctx = s[:, :-1]
        lm = bayes.autoregressive_loss(_extend(model_probs(model, ctx, ti)), s).per_sequence
        l2 = bayes.autoregressive_loss(_extend(bayes.twogen_all(ctx, tasks.c)), s).per_sequence
        scores[k] = float(np.mean(lm - l2))
    return MemorizationReport(scores, eps, tasks.k, it)


# ---------------------------------------------------------------- K1* search

@dataclass
class SearchResult:
    lo: float
    hi: float
    midpoint: float
    probes: List[Tuple[int, float, bool]]
    flag: str = "ok"


def k1_search(probe: Callable[[int], float], k_lo: int, k_hi: int, phi_threshold: float = PHI_STAR,
              max_probes: int = 8) -> SearchResult:
    """Binary search in log K for the smallest K whose max phi_beta crosses the threshold.

    ``probe(K)`` trains one model and returns max_t phi_beta^(2)(t). The response is assumed
    monotone in K (unmet below K1*, met above). Endpoints are probed first; if the bracket
    is not valid the result carries flag 'unbracketed'.
    """
    if not 1 <= k_lo < k_hi:
        raise ValueError("need 1 <= k_lo < k_hi")
    probes = []

    def run(k):
        v = float(probe(k))
        probes.append((k, v, v > phi_threshold))
        return v > phi_threshold

    lo_met, hi_met = run(k_lo), run(k_hi)
    if lo_met or not hi_met:
        lo, hi = (k_lo, k_lo) if lo_met else (k_hi, k_hi)
        return SearchResult(lo, hi, math.sqrt(lo * hi), probes, "unbracketed")
    lo, hi = k_lo, k_hi
    used = 2
    while hi - lo > 1:
        if used >= max_probes:
            return SearchResult(lo, hi, math.sqrt(lo * hi), probes, "budget")
        mid = int(round(math.sqrt(lo * hi)))
        mid = min(max(mid, lo + 1), hi - 1)
        if run(mid):
            hi = mid
        else:
            lo = mid
        used += 1
    return SearchResult(lo, hi, math.sqrt(lo * hi), probes)


# ---------------------------------------------------------------- divergence-time fit

@dataclass
class DeltaTauFit:
    k2: float
    gamma: float
    amplitude: float
    residuals: np.ndarray
    sse: float
    converged: bool


def _profile(ks: np.ndarray, logy: np.ndarray, k2: float):
    x = np.log(k2 - ks)
    A = np.stack([np.ones_like(x), -x], 1)
    coef, *_ = np.linalg.lstsq(A, logy, rcond=None)
    res = logy - A @ coef
    return float(res @ res), coef, res


def delta_tau_fit(ks: Sequence[float], dtaus: Sequence[float], max_factor: float = 1e3) -> DeltaTauFit:
    """Fit dtau = a (K2 - K)^(-gamma): K2 profiled over a log grid then refined by Brent's method,
    with the inner least squares on log dtau vs log(K2 - K)."""
    ks = np.asarray(ks, dtype=np.float64)
    y = np.asarray(dtaus, dtype=np.float64)
    if ks.size < 3:
        raise ValueError("underdetermined: need at least 3 points (4 recommended)")
    if ks.size < 4:
        warnings.warn("fewer than 4 K values; the divergence fit is weakly constrained")
    if np.any(y <= 0):
        raise ValueError("transition-time gaps must be positive")
    logy = np.log(y)
    kmax = ks.max()
    span = max(kmax - ks.min(), 1.0)
    # u = log(K2 - kmax)
    grid = np.linspace(math.log(span * 1e-4), math.log(span * max_factor), 400)
    sse = np.array([_profile(ks, logy, kmax + math.exp(u))[0] for u in grid])
    j = int(np.argmin(sse))
    lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, grid.size - 1)]
    opt = minimize_scalar(lambda u: _profile(ks, logy, kmax + math.exp(u))[0], bounds=(lo, hi),
                          method="bounded", options={"xatol": 1e-12})
    u = float(opt.x) if opt.success else grid[j]
    k2 = kmax + math.exp(u)
    s, coef, res = _profile(ks, logy, k2)
    at_edge = j in (0, grid.size - 1)
    with np.errstate(over="ignore"):
        amp = float(np.exp(coef[0]))  # inf when the profile runs off the grid
    return DeltaTauFit(k2, float(coef[1]), amp, res, s, bool(opt.success and not at_edge and math.isfinite(amp)))
