"""Ensemble statistics and escape-dynamics predictions for the SA-transformer plateau."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

import numpy as np

from .markov_data import make_rng, sample_dirichlet_columns, stationary_distribution


def harmonic(n: int) -> float:
    return float(np.sum(1.0 / np.arange(1, n + 1)))


def f1_analytic(c: int, alpha) -> Fraction | float:
    """(C - 1)/(C^2 alpha + C); exact Fraction for rational alpha, 0 for alpha = inf."""
    if c < 2 or not alpha > 0:
        raise ValueError("need c >= 2 and alpha > 0")
    if math.isinf(alpha):
        return Fraction(0)
    if isinstance(alpha, float) and not float(alpha).is_integer():
        return (c - 1) / (c * c * alpha + c)
    a = Fraction(alpha)
    return Fraction(c - 1) / (c * c * a + c)


def _mean_sem(v: np.ndarray) -> Tuple[float, float]:
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def trace_powers(t: np.ndarray, d_max: int, tol: float = 1e-15) -> np.ndarray:
    """tr(T^{d+1}) - 1 for d = 1..d_max per matrix, shape (B, d_max).

    Uses tr(T^k) - 1 = tr(R^k) with R = T - p 1^T, which removes the unit eigenvalue
    before powering (no cancellation; exact zero for the uniform matrix). Once every
    |tr R^k| < tol the remaining entries are filled with the converged value.
    """
    b, c, _ = t.shape
    p = stationary_distribution(t)
    r = t - p[:, :, None] * np.ones((1, 1, c))
    out = np.zeros((b, d_max))
    power = r @ r
    for d in range(1, d_max + 1):
        out[:, d - 1] = np.trace(power, axis1=1, axis2=2)
        if np.abs(out[:, d - 1]).max() < tol:
            out[:, d:] = out[:, d - 1: d]
            break
        power = power @ r
    return out


def per_matrix_i(t: np.ndarray, p: np.ndarray) -> np.ndarray:
    """sum_mu p_mu^2 (sum_tau T_{tau mu}^2 / p_tau - 1) for each matrix."""
    inner = (t ** 2 / p[:, :, None]).sum(1) - 1.0
    return (p ** 2 * inner).sum(1)


@dataclass
class EnsembleStats:
    """Monte-Carlo statistics of the Dirichlet ensemble with standard errors."""
    c: int = 10
    alpha: float = 1.0
    samples: int = 10_000
    seed: int = 0
    chunk: int = 20_000
    _cache: Dict = field(default_factory=dict, repr=False)

    def _chunks(self):
        done = 0
        idx = 0
        while done < self.samples:
            b = min(self.chunk, self.samples - done)
            t = sample_dirichlet_columns(make_rng(self.seed, 31, idx), self.c, self.alpha, b)
            yield t
            done += b
            idx += 1

    def _collect(self, key, fn):
        if key not in self._cache:
            self._cache[key] = np.concatenate([fn(t) for t in self._chunks()])
        return self._cache[key]

    def f_values(self, d_max: int) -> np.ndarray:
        return self._collect(("F", d_max), lambda t: trace_powers(t, d_max))

    def f_d(self, d: int) -> Tuple[float, float]:
        if d < 1:
            raise ValueError("d must be >= 1")
        return _mean_sem(self.f_values(d)[:, d - 1])

    def i_values(self) -> np.ndarray:
        return self._collect("I", lambda t: per_matrix_i(t, stationary_distribution(t)))

    def i(self) -> Tuple[float, float]:
        return _mean_sem(self.i_values())

    def c_beta_first_term(self) -> Tuple[float, float]:
        """<sum_mu p_mu T_mu mu - p_mu^2>, the part of c_beta the theory neglects."""
        def fn(t):
            p = stationary_distribution(t)
            return (p * np.einsum("bmm->bm", t) - p ** 2).sum(1)
        return _mean_sem(self._collect("cb1", fn))

    def l1gen(self) -> Tuple[float, float]:
        """Asymptotic 1-Gen loss -<sum p log p>."""
        def fn(t):
            p = stationary_distribution(t)
            return -(p * np.log(p)).sum(1)
        return _mean_sem(self._collect("L1", fn))

    def l2gen(self) -> Tuple[float, float]:
        """Asymptotic 2-Gen loss -<sum p_mu T log T>."""
        def fn(t):
            p = stationary_distribution(t)
            return -(p[:, None, :] * t * np.log(t)).sum((1, 2))
        return _mean_sem(self._collect("L2", fn))

    def rows(self, d_max: int = 6) -> List[Dict]:
        out = []
        for d in range(1, d_max + 1):
            e, s = self.f_d(d)
            out.append(dict(quantity="F_d", n_or_d=d, estimate=e, sem=s, samples=self.samples, seed=self.seed))
        for name, fn in (("I", self.i), ("c_beta_first_term", self.c_beta_first_term),
                         ("L1gen", self.l1gen), ("L2gen", self.l2gen)):
            e, s = fn()
            out.append(dict(quantity=name, n_or_d=0, estimate=e, sem=s, samples=self.samples, seed=self.seed))
        return out


def f_d_mc(d: int, ensemble: EnsembleStats) -> Tuple[float, float]:
    return ensemble.f_d(d)


def i_mc(ensemble: EnsembleStats) -> Tuple[float, float]:
    return ensemble.i()


def c_delta(w_b: float, w_d: float, n: int, ensemble: Optional[EnsembleStats] = None,
            f_values: Optional[np.ndarray] = None) -> float:
    """w_B F_1/N + (w_D/N) sum_{i<=N} F_{N-i+1}/i with Monte-Carlo F_d (F_1 analytic if no ensemble)."""
    if n < 2:
        raise ValueError("n must be >= 2")
    if f_values is None:
        if ensemble is None:
            raise ValueError("need an ensemble or explicit F_d values")
        f_values = ensemble.f_values(n).mean(0)
    f = np.asarray(f_values, dtype=np.float64)
    i = np.arange(1, n + 1)
    tail = np.sum(f[n - i] / i)  # F_{N-i+1} sits at index N-i
    return w_b * f[0] / n + w_d / n * tail


def c_beta(w_c: float, n: int, i_value: float) -> float:
    if n < 2:
        raise ValueError("n must be >= 2")
    return w_c * harmonic(n) / n * i_value


def predicted_flow(n: int, steps: int, lr: float, i_value: float, f1: float, mode: str = "control",
                   eval_every: int = 1, w_b: float = 1 / 3, w_c: float = 1 / 3) -> Dict[str, np.ndarray]:
    """Euler integration in optimizer-step units of

        dbeta/dt  = w_C (H_N/N) I
        ddelta/dt = w_C (H_N/N) I beta + w_B F_1/N      (no F_1 term when mode == 'ablated')
    """
    if mode not in ("control", "ablated"):
        raise ValueError(f"unknown mode {mode}")
    h = harmonic(n) / n
    dt = lr * eval_every
    count = steps // eval_every + 1
    beta = np.zeros(count)
    delta = np.zeros(count)
    drift = w_b * f1 / n if mode == "control" else 0.0
    for k in range(1, count):
        b, d = beta[k - 1], delta[k - 1]
        beta[k] = b + dt * w_c * h * i_value
        delta[k] = d + dt * (w_c * h * i_value * b + drift)
    return {"iter": np.arange(count) * eval_every, "beta": beta, "delta": delta, "units": "optimizer steps x lr"}


def tau_prediction(n: int, mode: str = "nonauto") -> float:
    """N/H_N (fixed length) or (1/N sum_{m<=N} H_m/m)^{-1} (autoregressive), arbitrary units."""
    if n < 2:
        raise ValueError("n must be >= 2")
    if mode == "nonauto":
        return n / harmonic(n)
    if mode == "auto":
        h = np.cumsum(1.0 / np.arange(1, n + 1))
        return 1.0 / (np.sum(h / np.arange(1, n + 1)) / n)
    raise ValueError(f"unknown mode {mode}")


def wa_decay_rate(ensemble: EnsembleStats) -> Tuple[float, float]:
    """<-1 + sum_mu T_mu mu / p_mu>, the small-w_A relaxation rate of the repeat expert."""
    def fn(t):
        p = stationary_distribution(t)
        return -1.0 + (np.einsum("bmm->bm", t) / p).sum(1)
    return _mean_sem(ensemble._collect("wa", fn))
