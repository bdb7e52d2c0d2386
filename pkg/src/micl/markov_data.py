"""Dirichlet-ensemble Markov chains: matrices, stationary laws, sequences and task sets.

Convention: ``entries[tau, mu] = P(next = tau | current = mu)``, so every column is a
probability vector and the stationary law satisfies ``entries @ p = p``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np


class ParameterError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def make_rng(*keys: int) -> np.random.Generator:
    """Independent PCG64 stream keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in keys])))


# stream tags keep matrix, sequence and batch draws on disjoint key spaces
_MATRIX_STREAM = 0
_SEQUENCE_STREAM = 1
_ENSEMBLE_STREAM = 2


def _check_params(c: int, alpha: float) -> None:
    if int(c) != c or c < 2:
        raise ParameterError(f"state count must be an integer >= 2, got {c}")
    if not alpha > 0:
        raise ParameterError(f"Dirichlet concentration must be positive, got {alpha}")


def stationary_distribution(entries: np.ndarray, tol: float = 1e-13, max_iter: int = 100_000) -> np.ndarray:
    """Power iteration from the uniform start; accepts (C, C) or a stack (B, C, C)."""
    t = np.asarray(entries, dtype=np.float64)
    single = t.ndim == 2
    if single:
        t = t[None]
    c = t.shape[-1]
    p = np.full(t.shape[:-1], 1.0 / c)
    for it in range(1, max_iter + 1):
        q = np.einsum("btm,bm->bt", t, p)
        q /= q.sum(-1, keepdims=True)
        gap = np.abs(q - p).sum(-1).max()
        p = q
        if gap < tol:
            return p[0] if single else p
    raise NumericError(f"power iteration did not converge after {max_iter} iterations (L1 gap {gap:.3e})")


@dataclass(frozen=True)
class TransitionMatrix:
    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ParameterError(f"transition matrix must be square, got shape {e.shape}")
        if (e < 0).any() or np.abs(e.sum(0) - 1.0).max() > 1e-12:
            raise ParameterError("columns must be probability vectors")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def c(self) -> int:
        return self.entries.shape[0]

    @cached_property
    def stationary(self) -> np.ndarray:
        p = stationary_distribution(self.entries)
        p.setflags(write=False)
        return p


@dataclass(frozen=True)
class Sequence:
    states: np.ndarray
    task_index: Optional[int] = None

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.int64)
        if s.ndim != 1 or s.size < 1:
            raise ParameterError("a sequence needs at least one state")
        if (s < 0).any():
            raise ParameterError("states must be non-negative")
        s.setflags(write=False)
        object.__setattr__(self, "states", s)

    def __len__(self) -> int:
        return self.states.size


def sample_dirichlet_columns(rng: np.random.Generator, c: int, alpha: float, batch: Optional[int] = None) -> np.ndarray:
    """Columns i.i.d. Dir(alpha) via normalized Gamma(alpha, 1) draws."""
    _check_params(c, alpha)
    shape = (c, c) if batch is None else (batch, c, c)
    g = rng.gamma(alpha, 1.0, size=shape)
    return g / g.sum(-2, keepdims=True)


def sample_transition_matrix(rng: np.random.Generator, c: int, alpha: float) -> TransitionMatrix:
    return TransitionMatrix(sample_dirichlet_columns(rng, c, alpha))


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One draw per row of ``probs`` (shape (..., C)) by inverse CDF."""
    cdf = np.cumsum(probs, -1)
    u = rng.random(probs.shape[:-1])[..., None]
    return np.minimum((u > cdf).sum(-1), probs.shape[-1] - 1)


def sample_sequence(t: TransitionMatrix, n: int, rng: np.random.Generator, task_index: Optional[int] = None) -> Sequence:
    if n < 1:
        raise ParameterError("sequence length must be >= 1")
    states = sample_batch(t.entries[None], n, rng, stationary=t.stationary[None])[0]
    return Sequence(states, task_index)


def sample_batch(entries: np.ndarray, n: int, rng: np.random.Generator,
                 stationary: Optional[np.ndarray] = None) -> np.ndarray:
    """Vectorized sampling: one chain per matrix in the stack (B, C, C); returns (B, n) int64."""
    if n < 1:
        raise ParameterError("sequence length must be >= 1")
    entries = np.asarray(entries, dtype=np.float64)
    b, c = entries.shape[0], entries.shape[-1]
    p = stationary_distribution(entries) if stationary is None else stationary
    cols = np.cumsum(entries, 1)  # cdf over tau for each column mu
    out = np.empty((b, n), dtype=np.int64)
    out[:, 0] = _categorical(rng, p)
    rows = np.arange(b)
    for i in range(1, n):
        cdf = cols[rows, :, out[:, i - 1]]
        u = rng.random(b)[:, None]
        out[:, i] = np.minimum((u > cdf).sum(-1), c - 1)
    return out


def ablate_penultimate(seq: Sequence, t: TransitionMatrix, rng: np.random.Generator) -> Sequence:
    """Replace s_{N-1} by an independent stationary draw."""
    if len(seq) < 2:
        raise ParameterError("bias ablation needs length >= 2")
    s = seq.states.copy()
    s[-2] = _categorical(rng, t.stationary)
    return Sequence(s, seq.task_index)


ABLATION_LAWS = ("stationary", "context")


def ablate_penultimate_batch(states: np.ndarray, stationary: np.ndarray, rng: np.random.Generator,
                             position: Optional[int] = None, law: str = "stationary") -> np.ndarray:
    """Batched ablation; ``position`` is the 0-based index to resample (default: second to last).

    law 'stationary' draws from each row's stationary distribution; 'context' copies the
    state at a uniformly chosen earlier position (0 .. position-1) of the same row, i.e. a
    draw from the sequence's own empirical distribution.
    """
    if states.shape[1] < 2:
        raise ParameterError("bias ablation needs length >= 2")
    if law not in ABLATION_LAWS:
        raise ParameterError(f"unknown ablation law {law}")
    out = states.copy()
    idx = states.shape[1] - 2 if position is None else position
    if law == "stationary":
        out[:, idx] = _categorical(rng, stationary)
    else:
        if idx < 1:
            raise ParameterError("context ablation needs an earlier position")
        j = rng.integers(0, idx, size=states.shape[0])
        out[:, idx] = states[np.arange(states.shape[0]), j]
    return out


@dataclass(frozen=True)
class TaskSet:
    matrices: tuple
    seed: int
    alpha: float

    @property
    def k(self) -> int:
        return len(self.matrices)

    @property
    def c(self) -> int:
        return self.matrices[0].c

    @cached_property
    def entries(self) -> np.ndarray:
        return np.stack([m.entries for m in self.matrices])

    @cached_property
    def stationary(self) -> np.ndarray:
        return np.stack([m.stationary for m in self.matrices])

    def sample(self, batch: int, n: int, rng: np.random.Generator, tasks: Optional[np.ndarray] = None):
        """Draw ``batch`` sequences from uniformly chosen members; returns (states, task_idx)."""
        if tasks is None:
            tasks = rng.integers(0, self.k, size=batch)
        states = sample_batch(self.entries[tasks], n, rng, stationary=self.stationary[tasks])
        return states, np.asarray(tasks)

    def sequence(self, task: int, index: int, n: int) -> Sequence:
        """Sequence ``index`` of member ``task`` on its own stream."""
        rng = make_rng(self.seed, _SEQUENCE_STREAM, task, index)
        return sample_sequence(self.matrices[task], n, rng, task_index=task)

    def to_json(self) -> dict:
        return {"seed": int(self.seed), "k": self.k, "c": self.c, "alpha": float(self.alpha)}


def build_task_set(seed: int, k: int, c: int, alpha: float = 1.0) -> TaskSet:
    """Member j is drawn from stream (seed, j) only, so task sets nest across k."""
    if k < 1:
        raise ParameterError("task count must be >= 1")
    _check_params(c, alpha)
    mats = tuple(sample_transition_matrix(make_rng(seed, _MATRIX_STREAM, j), c, alpha) for j in range(k))
    return TaskSet(mats, int(seed), float(alpha))


def task_set_from_json(obj: dict) -> TaskSet:
    return build_task_set(obj["seed"], obj["k"], obj["c"], obj["alpha"])


class EnsembleSampler:
    """Fresh Dirichlet matrices per batch (the K -> infinity regime)."""

    def __init__(self, c: int, alpha: float, seed: int):
        _check_params(c, alpha)
        self.c, self.alpha, self.seed = c, alpha, seed

    def batch(self, step: int, batch: int, n: int, ablate: bool = False, target: bool = True,
              law: str = "stationary"):
        """Matrices, stationary laws and states of length n (+1 target state when ``target``).

        With ``ablate`` the context state s_{n-1} is resampled under ``law``.
        """
        rng = make_rng(self.seed, _ENSEMBLE_STREAM, step)
        t = sample_dirichlet_columns(rng, self.c, self.alpha, batch)
        p = stationary_distribution(t)
        s = sample_batch(t, n + 1 if target else n, rng, stationary=p)
        if ablate:
            s = ablate_penultimate_batch(s, p, rng, position=n - 2, law=law)
        return t, p, s


def save_sequences(path: str | Path, states: np.ndarray, c: int, seed: int) -> None:
    """uint16 little-endian payload plus a JSON sidecar ``<path>.json``."""
    path = Path(path)
    states = np.asarray(states)
    if states.max(initial=0) >= 2**16 or states.min(initial=0) < 0:
        raise ParameterError("states do not fit in uint16")
    states.astype("<u2").tofile(path)
    meta = {"n": int(states.shape[1]), "batch": int(states.shape[0]), "c": int(c), "seed": int(seed)}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1))


def load_sequences(path: str | Path):
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    states = np.fromfile(path, dtype="<u2").astype(np.int64).reshape(meta["batch"], meta["n"])
    return states, meta
