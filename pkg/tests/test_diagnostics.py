import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from micl import bayes
from micl.diagnostics import (MemorizationReport, PHI_STAR, behavioral_grid, delta_tau_fit, k1_search,
                              memorization_scores, n_attend_from_attention, phi_beta_from_attention,
                              phi_delta_from_attention, readout)
from micl.markov_data import build_task_set, make_rng
from micl.transformer import Transformer, TransformerConfig


def _uniform(b, n):
    a = np.tril(np.ones((n, n))) / np.arange(1, n + 1)[:, None]
    return np.broadcast_to(a, (b, n, n)).copy()


def _prev_token(b, n):
    a = np.zeros((b, n, n))
    a[:, 0, 0] = 1
    a[:, np.arange(1, n), np.arange(n - 1)] = 1
    return a


def test_phi_delta():
    n = 40
    assert math.isclose(phi_delta_from_attention(_uniform(3, n)), (sum(1 / i for i in range(1, n + 1)) - 1) / (n - 1))
    assert phi_delta_from_attention(_prev_token(3, n)) == 1.0
    assert phi_delta_from_attention(np.ones((2, 1, 1))) == 0.0


def _induction(states):
    b, n = states.shape
    a = np.zeros((b, n, n))
    for k in range(b):
        for q in range(n):
            hits = [i for i in range(1, q + 1) if states[k, i - 1] == states[k, q]]
            if hits:
                a[k, q, hits] = 1 / len(hits)
            else:
                a[k, q, q] = 1
    return a


def test_phi_beta_perfect_induction():
    s = np.tile(np.arange(4), (2, 10))  # period 4: every position from the fifth on has a match
    n = s.shape[1]
    expect = (n - 4) / n
    assert math.isclose(phi_beta_from_attention(_induction(s), s), expect)


def test_phi_beta_uniform_monte_carlo():
    c, n = 10, 64
    s = make_rng(0).integers(0, c, (4000, n))
    v = phi_beta_from_attention(_uniform(4000, n), s)
    # iid uniform states: each (query n, key i <= n) pair matches with probability 1/C
    expect = sum((q - 1) / q for q in range(2, n + 1)) / (n * c)
    assert abs(v - expect) < 3e-3


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 12))
def test_order_parameters_bounded(seed, n):
    rng = make_rng(seed)
    logits = rng.normal(0, 3, (3, n, n))
    logits[:, np.triu_indices(n, 1)[0], np.triu_indices(n, 1)[1]] = -np.inf
    a = np.exp(logits - logits.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    s = rng.integers(0, 3, (3, n))
    assert 0 <= phi_delta_from_attention(a) <= 1
    assert 0 <= phi_beta_from_attention(a, s) <= 1
    assert 1 - 1e-12 <= n_attend_from_attention(a) <= n + 1e-9


def test_n_attend():
    assert math.isclose(n_attend_from_attention(_uniform(2, 17)), 17)
    assert n_attend_from_attention(_prev_token(2, 9)) == 1.0
    a = np.zeros((1, 5, 5))
    a[0, -1, [1, 3]] = 0.5
    assert math.isclose(n_attend_from_attention(a), 2)


def test_readout_on_model():
    m = Transformer(TransformerConfig(c=4, d=8, n_max=16), seed=0)
    s = make_rng(1).integers(0, 4, (5, 16))
    r = readout(m, s, it=3)
    assert r.iter == 3
    for pair in (r.phi_delta, r.phi_beta):
        assert all(0 <= v <= 1 for v in pair)
    assert all(1 <= v <= 16 for v in r.n_attend)


def _twogen_model(states, task_idx=None):
    return bayes.twogen_all(states, 10)


def test_behavioral_grid_self_consistency():
    ts = build_task_set(0, 4, 10)
    rows = behavioral_grid([(0, _twogen_model)], ts, 32, train_batch=64, ood_batch=64)
    v = {r["metric"]: r["value"] for r in rows}
    assert v["D_2-Gen"] == 0.0
    assert all(np.isfinite(r["value"]) and r["value"] >= 0 for r in rows)
    assert {"loss_train", "loss_gen"} <= set(v)
    assert rows[0]["K"] == 4 and rows[0]["iter"] == 0


def test_behavioral_grid_each_predictor_self_zero():
    ts = build_task_set(1, 3, 10)
    for kind in ("1-Gen", "2-Gen", "1-Mem", "2-Mem"):
        rows = behavioral_grid([(0, lambda s, t, k=kind: bayes.predict_all(k, s, 10, ts))], ts, 24,
                               train_batch=32, ood_batch=32)
        assert {r["metric"]: r["value"] for r in rows}[f"D_{kind}"] == 0.0


def test_memorization_scores():
    ts = build_task_set(2, 4, 10)
    rep = memorization_scores(_twogen_model, ts, 256, per_task=16)
    assert np.abs(rep.scores).max() < 1e-12 and rep.fraction_strict == 0.0

    def oracle(states, task_idx):
        t = ts.entries[np.asarray(task_idx)]
        return np.take_along_axis(t, np.asarray(states)[:, None, :], 2).transpose(0, 2, 1)
    rep = memorization_scores(oracle, ts, 256, per_task=32)
    assert (rep.scores < 0).all() and rep.fraction_strict == 1.0

    untrained = Transformer(TransformerConfig(c=10, d=16, n_max=256), seed=0)
    rep = memorization_scores(untrained, ts, 256, per_task=8)
    assert (rep.scores > 0).all() and rep.fraction(1e-3) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=20), st.floats(0, 0.5), st.floats(0, 0.5))
def test_memorization_fraction_monotone(scores, e1, e2):
    rep = MemorizationReport(np.array(scores), 1e-3, len(scores))
    lo, hi = sorted((e1, e2))
    assert rep.fraction(hi) <= rep.fraction(lo)
    assert rep.fraction(hi, strict=False) >= rep.fraction(lo, strict=False)
    assert rep.fraction_strict <= rep.fraction_loose


def test_k1_search_step_probe():
    calls = []

    def probe(k):
        calls.append(k)
        return 0.9 if k >= 37 else 0.1
    r = k1_search(probe, 1, 1000, max_probes=20)
    assert (r.lo, r.hi, r.flag) == (36, 37, "ok")
    assert calls[:2] == [1, 1000]
    assert all(met == (k >= 37) for k, _, met in r.probes)
    assert PHI_STAR == 0.45


def test_k1_search_edge_cases():
    assert k1_search(lambda k: 0.9, 2, 64).flag == "unbracketed"
    r = k1_search(lambda k: 0.1, 2, 64)
    assert r.flag == "unbracketed" and r.lo == 64
    assert k1_search(lambda k: 0.9 if k >= 500 else 0.0, 1, 10_000, max_probes=4).flag == "budget"
    with pytest.raises(ValueError):
        k1_search(lambda k: 0, 5, 5)


def test_delta_tau_fit_exact():
    ks = np.array([10, 30, 50, 70, 85])
    y = 3e5 * (100 - ks) ** -2.0
    fit = delta_tau_fit(ks, y)
    assert abs(fit.k2 - 100) < 1e-4 and abs(fit.gamma - 2) < 1e-6 and fit.converged
    assert fit.sse < 1e-16


def test_delta_tau_fit_noisy():
    rng = make_rng(3)
    ks = np.array([10, 25, 40, 55, 70, 80, 88])
    ok = 0
    for trial in range(20):
        y = 3e5 * (100 - ks) ** -2.0 * (1 + 0.05 * rng.normal(size=ks.size))
        fit = delta_tau_fit(ks, y)
        ok += abs(fit.k2 / 100 - 1) < 0.15 and abs(fit.gamma / 2 - 1) < 0.15
    assert ok >= 19


def test_delta_tau_fit_errors():
    with pytest.raises(ValueError):
        delta_tau_fit([1, 2], [1.0, 2.0])
    with pytest.warns(UserWarning):
        delta_tau_fit([1, 2, 3], [1.0, 2.0, 4.0])
    with pytest.raises(ValueError):
        delta_tau_fit([1, 2, 3, 4], [1.0, -2.0, 4.0, 5.0])


def test_plateau_model_nearer_one_gen_than_two_gen():
    from micl.transformer import TrainConfig, train
    ts = build_task_set(0, 1024, 10)
    m = Transformer(TransformerConfig(c=10, d=32, n_max=64), seed=0)
    train(m, TrainConfig(k=1024, c=10, n=64, batch=32, iters=500, eval_every=500, eval_batch=32), ts, readouts=False)
    v = {r["metric"]: r["value"] for r in behavioral_grid([(500, m)], ts, 64, train_batch=256, ood_batch=256)}
    assert v["D_1-Gen"] < v["D_2-Gen"]
