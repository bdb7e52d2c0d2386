"""Path-expanded edge graph of the two-layer transformer, mean-ablation tracing,
task-vector patching and task-vector mutual information.

Source vectors written to the residual stream:
    Token = x0, A1(Token) = Att1 output, MLP1, A2(src) for src in {Token, A1, MLP1}, MLP2.
The second attention output splits exactly into per-source parts by normalizing each
source with its own mean and the shared scale of the full stream x1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import torch
from scipy.special import logsumexp

from . import bayes
from .autodiff import ContractError, LN_EPS, layer_norm, ln_stats
from .markov_data import TaskSet, stationary_distribution
from .transformer import Transformer

SOURCES = ("Token", "A1(Token)", "MLP1", "A2(Token)", "A2(A1)", "A2(MLP1)", "MLP2")
TARGETS = ("A1Q", "A1K", "MLP1", "A2Q", "A2K", "MLP2", "Linear")

_INPUTS = {
    "A1Q": SOURCES[:1], "A1K": SOURCES[:1],
    "MLP1": SOURCES[:2],
    "A2Q": SOURCES[:3], "A2K": SOURCES[:3],
    "MLP2": SOURCES[:6],
    "Linear": SOURCES,
}


class EdgeId(NamedTuple):
    source: str
    target: str


def enumerate_edges() -> List[EdgeId]:
    return [EdgeId(s, t) for t in TARGETS for s in _INPUTS[t]]


def _check_model(model: Transformer):
    if model.cfg.heads != 1:
        raise ContractError("path expansion is defined for single-head attention")


def _edge_valid(model: Transformer, e: EdgeId) -> bool:
    if e.target not in _INPUTS or e.source not in _INPUTS[e.target]:
        return False
    if not model.cfg.mlp1 and ("MLP1" in e.source or e.target == "MLP1" or e.source == "A2(MLP1)"):
        return False
    return True


# ---------------------------------------------------------------- decomposed forward

def _attend(model: Transformer, layer: int, hq: torch.Tensor, hk: torch.Tensor, hv: torch.Tensor):
    out, A = model.attention(layer, hq, q_in=hq, k_in=hk, v_in=hv)
    return out, A[:, 0]


def decomposed_forward(model: Transformer, states, perturb: Optional[Dict[str, torch.Tensor]] = None,
                       task_idx=None) -> Dict[str, torch.Tensor]:
    """Forward pass exposing every source vector.

    ``perturb`` maps a target name to a (B, N, D) offset added to that target's input; the
    target's layer norm keeps the statistics of its unperturbed input.
    """
    _check_model(model)
    pt = perturb or {}
    st = torch.as_tensor(np.asarray(states)).long()
    if st.dim() == 1:
        st = st[None]
    zero = 0.0
    x0 = model.embed(st)
    s0 = ln_stats(x0)
    h0 = layer_norm(x0, s0)
    hq = layer_norm(x0 + pt.get("A1Q", zero), s0)
    hk = layer_norm(x0 + pt.get("A1K", zero), s0)
    att1, A1 = _attend(model, 1, hq, hk, h0)
    y1 = x0 + att1
    if model.cfg.mlp1:
        extra = model.task_vectors(None if task_idx is None else torch.as_tensor(task_idx), st.shape[0])
        base = y1 if extra is None else y1 + extra
        m1 = model.mlp(1, base + pt.get("MLP1", zero), stats=ln_stats(base))
    else:
        m1 = torch.zeros_like(y1)
    x1 = y1 + m1
    s1 = ln_stats(x1)
    h1 = layer_norm(x1, s1)
    hq = layer_norm(x1 + pt.get("A2Q", zero), s1)
    hk = layer_norm(x1 + pt.get("A2K", zero), s1)
    att2, A2 = _attend(model, 2, hq, hk, h1)
    scale = torch.sqrt(s1[1] + LN_EPS)
    WV = model.W_V2
    parts = {}
    for name, src in (("A2(Token)", x0), ("A2(A1)", att1), ("A2(MLP1)", m1)):
        normed = (src - src.mean(-1, keepdim=True)) / scale
        parts[name] = A2 @ (normed @ WV.T)
    y2 = x1 + att2
    m2 = model.mlp(2, y2 + pt.get("MLP2", zero), stats=ln_stats(y2))
    x2 = y2 + m2
    logits = (x2 + pt.get("Linear", zero)) @ model.W_U
    out = {"Token": x0, "A1(Token)": att1, "MLP1": m1, **parts, "MLP2": m2,
           "att2": att2, "x1": x1, "y2": y2, "x2": x2, "logits": logits, "A1": A1, "A2": A2}
    return out


def _kl_rows(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    """D_KL^{S_N}(p || q) per sequence from logits (B, N, C)."""
    lp = torch.log_softmax(p_logits, -1)
    lq = torch.log_softmax(q_logits, -1)
    return (lp.exp() * (lp - lq)).sum(-1).mean(-1)


@dataclass
class ImportanceMap:
    values: Dict[EdgeId, float]
    batch: int
    n: int

    def rows(self) -> List[Dict]:
        return [{"source": e.source, "target": e.target, "kl_nats": v} for e, v in self.values.items()]


@torch.no_grad()
def trace(model: Transformer, states, edges: Optional[Sequence[EdgeId]] = None, task_idx=None) -> ImportanceMap:
    """Mean KL(unperturbed || perturbed) when each edge carries its batch-mean vector."""
    _check_model(model)
    edges = [e for e in enumerate_edges() if _edge_valid(model, e)] if edges is None else list(edges)
    for e in edges:
        if not _edge_valid(model, EdgeId(*e)):
            raise ContractError(f"invalid edge {e}")
    base = decomposed_forward(model, states, task_idx=task_idx)
    out = {}
    for e in edges:
        e = EdgeId(*e)
        src = base[e.source]
        offset = -(src - src.mean(0, keepdim=True))
        # coordinates constant over the batch are their own mean; keep them exact
        offset = torch.where((src == src[:1]).all(0, keepdim=True), torch.zeros_like(offset), offset)
        pert = decomposed_forward(model, states, {e.target: offset}, task_idx=task_idx)
        out[e] = float(_kl_rows(base["logits"], pert["logits"]).mean().clamp_min(0.0))
    st = np.asarray(states)
    return ImportanceMap(out, st.shape[0], st.shape[-1])


# ---------------------------------------------------------------- patching

def hybrid_predictor(post_states: np.ndarray, cur_states: np.ndarray, tasks: TaskSet, order: int) -> np.ndarray:
    """Memorizing predictor with the posterior from ``post_states`` and current states from ``cur_states``."""
    return bayes.mem_all(cur_states, tasks, order, posterior_from=post_states)


def _similarity(pred: np.ndarray, model_p: np.ndarray) -> float:
    c = pred.shape[-1]
    d = bayes.kl_sequence(pred, model_p).mean()
    du = bayes.kl_sequence(pred, np.full_like(pred, 1.0 / c)).mean()
    return float(math.exp(-d / du))


_SITES = {"Att2": ("att2", 2), "Att1": ("att1", 1), "phi": ("phi", 2)}


@torch.no_grad()
def patch_task_vector(model, batch_a: np.ndarray, batch_b: np.ndarray, tasks: TaskSet,
                      site: str = "Att2", task_a=None, task_b=None, per_sequence: bool = False):
    """Similarity of conditions {A, B, B(patch A), A(patch B)} to predictors {AA, AB, BA, BB}.

    Predictor XY uses the posterior from sequences X and the current states of Y. Site
    'Att2' and 'Att1' apply to the transformer, 'phi' to the minimal model. With
    ``per_sequence`` each row also carries the per-sequence divergences.
    """
    if site not in _SITES:
        raise ContractError(f"unknown patch site {site}")
    key, order = _SITES[site]
    is_minimal = hasattr(model, "pair_table")
    if (site == "phi") != is_minimal:
        raise ContractError(f"site {site} is unavailable for this model")
    if site == "Att1" and not getattr(model.cfg, "mlp1", True):
        raise ContractError("Att1 patching expects the MLP1 read-out path")
    a, b = np.asarray(batch_a), np.asarray(batch_b)
    if a.shape != b.shape:
        raise ContractError("patch batches must have equal shape")
    inj = getattr(model.cfg, "task_injection", 0)
    ta = None if task_a is None or not inj else torch.as_tensor(task_a)
    tb = None if task_b is None or not inj else torch.as_tensor(task_b)
    sa, sb = torch.from_numpy(a).long(), torch.from_numpy(b).long()
    la, ca = model(sa, ta, cache=True)
    lb, cb = model(sb, tb, cache=True)
    lba = model(sb, tb, patch={key: ca[key]})
    lab = model(sa, ta, patch={key: cb[key]})
    probs = {c: torch.softmax(l, -1).double().numpy() for c, l in
             (("A", la), ("B", lb), ("B(patch A)", lba), ("A(patch B)", lab))}
    seqs = {"A": a, "B": b}
    preds = {x + y: hybrid_predictor(seqs[x], seqs[y], tasks, order) for x in "AB" for y in "AB"}
    table = []
    for cond, p in probs.items():
        for name, pr in preds.items():
            row = {"condition": cond, "predictor": name, "similarity": _similarity(pr, p)}
            if per_sequence:
                row["kl"] = bayes.kl_sequence(pr, p)
            table.append(row)
    return table


def donor_preference(table: List[Dict]) -> float:
    """Share of sequences where B(patch A) is closer to the donor-posterior predictor AB than to BB."""
    kl = {(r["condition"], r["predictor"]): r["kl"] for r in table if "kl" in r}
    if not kl:
        raise ContractError("table lacks per-sequence divergences")
    return float(np.mean(kl[("B(patch A)", "AB")] < kl[("B(patch A)", "BB")]))


# ---------------------------------------------------------------- task-vector information

@torch.no_grad()
def estimate_pair_embeddings(model) -> np.ndarray:
    """MLP1 output for every ordered pair (previous, current), columns indexed prev * C + cur."""
    if hasattr(model, "pair_embeddings"):
        return model.pair_embeddings()
    if not model.cfg.mlp1:
        raise ContractError("model has no MLP1")
    c = model.cfg.c
    pairs = torch.tensor([[p, q] for p in range(c) for q in range(c)])
    if model.cfg.task_injection:
        raise ContractError("pair embeddings are defined without task injection")
    _, cache = model(pairs, cache=True)
    return cache["mlp1"][:, -1].double().numpy().T


def pair_probabilities(tasks: TaskSet) -> np.ndarray:
    """p^k(prev, cur) = p_prev T[cur, prev], shape (K, C*C) in prev * C + cur order."""
    t = tasks.entries
    p = tasks.stationary
    return (p[:, None, :] * t).transpose(0, 2, 1).reshape(tasks.k, -1)


def pca_project(emb: np.ndarray, var: float = 0.90) -> np.ndarray:
    """Project embedding columns (D x M) onto the leading components holding ``var`` of the variance."""
    x = emb - emb.mean(1, keepdims=True)
    cov = x @ x.T / x.shape[1]
    w, v = np.linalg.eigh(cov)
    w, v = w[::-1], v[:, ::-1]
    tot = w.clip(min=0).sum()
    if tot <= 0:
        return np.zeros((1, emb.shape[1]))
    k = int(np.searchsorted(np.cumsum(w.clip(min=0)) / tot, var - 1e-12) + 1)
    return v[:, :k].T @ x


@dataclass
class MIResult:
    bits: float
    raw_bits: float
    dim: int
    ridge_used: bool


def gaussian_mixture_mi(means: np.ndarray, covs: np.ndarray, mc_samples: int = 1000, seed: int = 0,
                        ridge: float = 1e-9) -> MIResult:
    """I(K; phi) in bits for an equal-weight Gaussian mixture; clipped to [0, log2 K].

    H(phi | K) is exact; H(phi) uses Monte-Carlo samples stratified equally over components.
    """
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    k, d = means.shape
    covs = np.asarray(covs, dtype=np.float64).reshape(k, d, d)
    ridge_used = False
    chols = []
    for j in range(k):
        cj = covs[j]
        try:
            chols.append(np.linalg.cholesky(cj))
        except np.linalg.LinAlgError:
            ridge_used = True
            chols.append(np.linalg.cholesky(cj + ridge * max(1.0, np.trace(cj) / d) * np.eye(d)))
    L = np.stack(chols)
    logdet = 2 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(1)
    h_cond = float(np.mean(0.5 * (d * math.log(2 * math.pi * math.e) + logdet)))
    rng = np.random.default_rng(seed)
    per = max(1, mc_samples // k)
    z = rng.standard_normal((k, per, d))
    x = means[:, None, :] + np.einsum("kij,kpj->kpi", L, z)
    x = x.reshape(-1, d)
    # log density of every sample under every component
    logp = np.empty((x.shape[0], k))
    for j in range(k):
        diff = x - means[j]
        sol = np.linalg.solve(L[j], diff.T)
        logp[:, j] = -0.5 * (sol ** 2).sum(0) - 0.5 * logdet[j] - 0.5 * d * math.log(2 * math.pi)
    log_mix = logsumexp(logp, 1) - math.log(k)
    h = float(-log_mix.mean())
    raw = (h - h_cond) / math.log(2)
    return MIResult(float(np.clip(raw, 0.0, math.log2(k))), raw, d, ridge_used)


def task_vector_mi(embeddings: np.ndarray, tasks: TaskSet, n: int = 128, mc_samples: int = 1000,
                   pca_var: float = 0.90, seed: int = 0) -> MIResult:
    """Gaussian approximation of the pooled task vector per task: mean E p^k and
    covariance (1/n) E (diag p^k - p^k p^k^T) E^T in the PCA space of the pair embeddings."""
    e = pca_project(np.asarray(embeddings, dtype=np.float64), pca_var)
    pk = pair_probabilities(tasks)
    means = pk @ e.T
    covs = np.stack([e @ (np.diag(p) - np.outer(p, p)) @ e.T / n for p in pk])
    return gaussian_mixture_mi(means, covs, mc_samples, seed)


def mixture_mi_1d_oracle(mu: Sequence[float], sigma: Sequence[float], points: int = 200001) -> float:
    """Equal-weight 1-D Gaussian mixture MI in bits by trapezoidal integration."""
    mu, sigma = np.asarray(mu, dtype=np.float64), np.asarray(sigma, dtype=np.float64)
    lo, hi = (mu - 12 * sigma).min(), (mu + 12 * sigma).max()
    x = np.linspace(lo, hi, points)
    comp = np.exp(-0.5 * ((x[None] - mu[:, None]) / sigma[:, None]) ** 2) / (sigma[:, None] * math.sqrt(2 * math.pi))
    mix = comp.mean(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(mix > 0, -mix * np.log(mix), 0.0)
    h = np.trapezoid(f, x) if hasattr(np, "trapezoid") else np.trapz(f, x)
    h_cond = float(np.mean(0.5 * np.log(2 * math.pi * math.e * sigma ** 2)))
    return float((h - h_cond) / math.log(2))
