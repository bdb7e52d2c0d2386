"""Encoder-pool-decoder minimal 2-Mem network and the K2-hat binary search.

    x0_n = W_E x_n (frozen),  e_n = MLP1(x0_n (+) x0_{n-1}),
    phi_n = (1/n) sum_{i<=n} e_i,  logits_n = MLP2(x0_n (+) phi_n)

Position 1 pairs with a learned start embedding, so phi_n averages n pair embeddings.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
from torch import nn

from . import bayes
from .autodiff import DTYPE, AdamW, ContractError, NumericAbort, gelu
from .diagnostics import SearchResult
from .markov_data import TaskSet, build_task_set
from .transformer import Batcher, TrainConfig


@dataclass
class MinimalMemConfig:
    c: int = 10
    d_emb: int = 64
    d_phi: int = 64
    mlp1_layers: int = 1  # hidden layers
    mlp2_layers: int = 2
    float32: bool = False

    @property
    def dtype(self):
        return torch.float32 if self.float32 else DTYPE


class _MLP(nn.Module):
    """Linear-GELU stack with biases; the output layer starts at zero when ``zero_out``."""

    def __init__(self, d_in: int, hidden: int, d_out: int, layers: int, g: torch.Generator, dtype, zero_out=False):
        super().__init__()
        if layers not in (1, 2):
            raise ContractError("MLPs have one or two hidden layers")
        dims = [d_in] + [hidden] * layers + [d_out]
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            w = torch.zeros(b, a, dtype=dtype) if (last and zero_out) else torch.randn(b, a, generator=g, dtype=dtype) / math.sqrt(a)
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(torch.zeros(b, dtype=dtype)))

    def forward(self, x):
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.T + b
            if i < n - 1:
                x = gelu(x)
        return x


class MinimalMem(nn.Module):
    def __init__(self, cfg: MinimalMemConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(seed)
        dt = cfg.dtype
        self.register_buffer("W_E", torch.randn(cfg.d_emb, cfg.c, generator=g, dtype=dt))
        self.start = nn.Parameter(torch.randn(cfg.d_emb, generator=g, dtype=dt))
        self.mlp1 = _MLP(2 * cfg.d_emb, 4 * 2 * cfg.d_emb, cfg.d_phi, cfg.mlp1_layers, g, dt)
        self.mlp2 = _MLP(cfg.d_emb + cfg.d_phi, 4 * (cfg.d_emb + cfg.d_phi), cfg.c, cfg.mlp2_layers, g, dt, zero_out=True)

    def pair_table(self) -> torch.Tensor:
        """MLP1 output for (prev, cur) with prev in {0..C-1, start}; row prev * C + cur."""
        c = self.cfg.c
        prev = torch.cat([self.W_E.T, self.start[None]], 0)  # (C+1, D)
        cur = self.W_E.T
        y = torch.cat([cur[None].expand(c + 1, c, -1), prev[:, None].expand(c + 1, c, -1)], -1)
        return self.mlp1(y.reshape((c + 1) * c, -1))

    def pair_embeddings(self) -> np.ndarray:
        with torch.no_grad():
            return self.pair_table()[: self.cfg.c ** 2].double().numpy().T

    def forward(self, states, task_idx=None, cache: bool = False, patch: Optional[Dict[str, torch.Tensor]] = None):
        st = torch.as_tensor(np.asarray(states) if not torch.is_tensor(states) else states).long()
        if st.dim() == 1:
            st = st[None]
        c = self.cfg.c
        b, n = st.shape
        prev = torch.cat([torch.full((b, 1), c, dtype=torch.long), st[:, :-1]], 1)
        e = self.pair_table()[prev * c + st]
        phi = e.cumsum(1) / torch.arange(1, n + 1, dtype=e.dtype)[None, :, None]
        if patch and "phi" in patch:
            phi = patch["phi"]
        x0 = self.W_E.T[st]
        logits = self.mlp2(torch.cat([x0, phi], -1))
        if cache:
            return logits, {"x0": x0, "pair": e, "phi": phi, "logits": logits}
        return logits


def minimal_forward(model: MinimalMem, states) -> torch.Tensor:
    return torch.softmax(model(states), -1)


def minimal_loss(model: MinimalMem, s: np.ndarray) -> torch.Tensor:
    st = torch.from_numpy(np.asarray(s)).long()
    lp = torch.log_softmax(model(st[:, :-1]), -1)
    return -lp.gather(-1, st[:, 1:, None]).mean()


def _twogen_ar(s: np.ndarray, c: int) -> float:
    p = bayes.twogen_all(s[:, :-1], c)
    p = np.concatenate([p, p[:, -1:]], 1)
    return bayes.autoregressive_loss(p, s).mean


def minimal_train(model: MinimalMem, cfg: TrainConfig, tasks: Optional[TaskSet] = None,
                  callback=None) -> List[Dict[str, float]]:
    """AdamW on the autoregressive loss; rows {iter, loss_train, loss_gen, l2gen_train, l2gen_gen, wall_time}."""
    if cfg.k is not None and tasks is None:
        raise ContractError("finite-k training needs a task set")
    torch.manual_seed(cfg.seed)
    params = [p for p in model.parameters()]
    opt = AdamW(params, cfg.lr, cfg.betas, cfg.weight_decay)
    batches = Batcher(cfg, tasks)
    rows = []
    t0 = time.time()
    c = model.cfg.c
    for it in range(cfg.iters + 1):
        if it % cfg.eval_every == 0 or it == cfg.iters:
            with torch.no_grad():
                s, _ = batches.train_eval(it)
                g, _ = batches.gen_eval(it)
                row = {"iter": it, "loss_train": float(minimal_loss(model, s)), "loss_gen": float(minimal_loss(model, g)),
                       "l2gen_train": _twogen_ar(s, c), "l2gen_gen": _twogen_ar(g, c), "wall_time": time.time() - t0}
            rows.append(row)
            if callback is not None:
                callback(row)
        if it == cfg.iters:
            break
        s, _ = batches.train(it)
        loss = minimal_loss(model, s)
        if not torch.isfinite(loss):
            raise NumericAbort(f"non-finite minimal-model loss at iteration {it}")
        grads = torch.autograd.grad(loss, params)
        opt.step(list(grads))
    return rows


def train_margin(rows: List[Dict[str, float]], window: int) -> float:
    """Mean of loss_train - l2gen_train over the last ``window`` evaluations."""
    tail = rows[-window:]
    return float(np.mean([r["loss_train"] - r["l2gen_train"] for r in tail]))


def k2_search(arch: MinimalMemConfig, cfg: TrainConfig, k_lo: int, k_hi: int, window: int = 10,
              max_probes: int = 8, task_seed: int = 0, probe=None) -> SearchResult:
    """Binary search in log K for the largest K whose training margin stays below zero.

    ``probe(K) -> margin`` may be supplied; by default a fresh minimal model is trained per
    probe. Met (memorized) below the threshold, unmet above it.
    """
    if probe is None:
        def probe(k):
            tasks = build_task_set(task_seed, k, arch.c, cfg.alpha)
            m = MinimalMem(arch, cfg.seed)
            rows = minimal_train(m, TrainConfig(**{**cfg.__dict__, "k": k}), tasks)
            return train_margin(rows, window)
    probes = []

    def memorizes(k):
        v = float(probe(k))
        probes.append((k, v, v < 0))
        return v < 0

    lo_ok, hi_ok = memorizes(k_lo), memorizes(k_hi)
    if not lo_ok or hi_ok:
        import warnings
        warnings.warn("K2 search endpoints do not bracket the threshold")
        lo, hi = (k_lo, k_lo) if not lo_ok else (k_hi, k_hi)
        return SearchResult(lo, hi, math.sqrt(lo * hi), probes, "unbracketed")
    lo, hi, used = k_lo, k_hi, 2
    while hi - lo > 1:
        if used >= max_probes:
            return SearchResult(lo, hi, math.sqrt(lo * hi), probes, "budget")
        mid = min(max(int(round(math.sqrt(lo * hi))), lo + 1), hi - 1)
        if memorizes(mid):
            lo = mid
        else:
            hi = mid
        used += 1
    return SearchResult(lo, hi, math.sqrt(lo * hi), probes)
