import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from micl.markov_data import sample_dirichlet_columns, make_rng, stationary_distribution
from micl.sa_transformer import SATrainConfig, sa_train
from micl.theory import (EnsembleStats, c_beta, c_delta, f1_analytic, f_d_mc, harmonic, i_mc, per_matrix_i,
                         predicted_flow, tau_prediction, trace_powers, wa_decay_rate)


@pytest.fixture(scope="module")
def ens():
    return EnsembleStats(samples=20_000, seed=1)


def _f1_moments(c, alpha):
    """E tr(T^2) - 1 from Dirichlet column moments: diagonal second moments plus independent off-diagonal pairs."""
    a = Fraction(alpha)
    diag = c * a * (a + 1) / ((c * a) * (c * a + 1))
    off = Fraction(c * (c - 1), c * c)
    return diag + off - 1


def test_f1_analytic_values():
    assert f1_analytic(10, 1) == Fraction(9, 110)
    assert abs(float(f1_analytic(10, 1)) - 0.08) < 0.005
    assert f1_analytic(2, 1) == Fraction(1, 6)
    assert f1_analytic(10, math.inf) == 0
    assert f1_analytic(10, 1e9) < 1e-9
    with pytest.raises(ValueError):
        f1_analytic(1, 1)


@settings(max_examples=30, deadline=None)
@given(c=st.integers(2, 30), alpha=st.fractions(Fraction(1, 10), 20))
def test_f1_matches_moment_oracle(c, alpha):
    assert f1_analytic(c, alpha) == _f1_moments(c, alpha)


def test_f1_monte_carlo(ens):
    est, sem = f_d_mc(1, ens)
    assert abs(est - 9 / 110) < 3 * sem
    assert sem / est < 0.02


def test_f_d_envelope_decays(ens):
    f = [f_d_mc(d, ens)[0] for d in range(1, 7)]
    envelope = [max(f[d:]) for d in range(6)]
    assert all(a >= b for a, b in zip(envelope, envelope[1:]))
    assert f[0] > 5 * f[1] and f[5] < f[0] / 100


def test_uniform_matrix_zero():
    t = np.full((1, 10, 10), 0.1)
    assert np.abs(trace_powers(t, 6)).max() < 1e-30
    assert abs(per_matrix_i(t, np.full((1, 10), 0.1))[0]) < 1e-15


def test_trace_powers_against_eigenvalues():
    t = sample_dirichlet_columns(make_rng(0), 6, 1.0, 20)
    ev = np.linalg.eigvals(t)
    ref = np.stack([(ev ** (d + 1)).sum(-1).real - 1 for d in range(1, 9)], 1)
    assert np.allclose(trace_powers(t, 8), ref, atol=1e-12)


def test_i_nonnegative(ens):
    assert ens.i_values().min() >= -1e-12
    est, sem = i_mc(ens)
    assert est > 10 * sem


def test_i_permutation_limit():
    c, eps = 10, 1e-9
    t = np.roll(np.eye(c), 1, axis=0) * (1 - eps) + eps / c
    t /= t.sum(0)
    p = stationary_distribution(t)
    assert np.allclose(p, 0.1)
    assert abs(per_matrix_i(t[None], p[None])[0] - (c - 1) / c) < 1e-6


def test_c_delta():
    f = np.zeros(1024)
    f[0] = 9 / 110
    assert c_delta(0, 0, 1024, f_values=f) == 0
    assert math.isclose(c_delta(1 / 3, 0, 1024, f_values=f), (1 / 3) * (9 / 110) / 1024)
    with pytest.raises(ValueError):
        c_delta(1, 1, 1024)


def test_c_delta_dominant_term(ens):
    full = c_delta(1 / 3, 1 / 3, 1024, ensemble=ens)
    lead = (1 / 3) * (9 / 110) / 1024
    assert abs(full / lead - 1) < 0.15


def test_c_beta(ens):
    i = ens.i()[0]
    assert c_beta(0, 128, i) == 0
    assert c_beta(1 / 3, 128, i) > 0
    f = ens.f_values(1024).mean(0)
    ratios = [c_beta(1 / 3, n, i) / c_delta(1 / 3, 1 / 3, n, f_values=f[:n]) for n in (128, 1024)]
    expect = [harmonic(n) * i / (9 / 110) for n in (128, 1024)]
    assert ratios[1] > ratios[0]
    for r, e in zip(ratios, expect):
        assert abs(r / e - 1) < 0.05


def test_predicted_flow():
    n, i, f1 = 128, 0.073, 9 / 110
    ctl = predicted_flow(n, 1000, 1.0, i, f1)
    assert np.allclose(np.diff(ctl["beta"]), ctl["beta"][1])
    # delta is linear at early times while the F_1 drift dominates the beta-coupled term
    early = ctl["delta"][1:50]
    slope = np.polyfit(np.log(np.arange(1, 50)), np.log(early), 1)[0]
    assert abs(slope - 1) < 0.1
    abl = predicted_flow(n, 1000, 1.0, i, f1, mode="ablated")
    # without the drift the Euler recursion gives delta(t) = a^2 t (t - 1)/2, a = (H_N/N) I / 3
    a = harmonic(n) / n * i / 3
    t = abl["iter"].astype(float)
    assert np.allclose(abl["delta"], a * a * t * (t - 1) / 2, rtol=1e-12, atol=0)
    frozen = predicted_flow(n, 100, 0.0, i, f1)
    assert not frozen["beta"].any() and not frozen["delta"].any()
    assert predicted_flow(n, 100, 1.0, i, f1, eval_every=10)["iter"].tolist() == list(range(0, 101, 10))
    with pytest.raises(ValueError):
        predicted_flow(n, 10, 1.0, i, f1, mode="x")


def test_tau_prediction():
    r = tau_prediction(256) / tau_prediction(32)
    assert math.isclose(r, (256 / harmonic(256)) / (32 / harmonic(32)))
    for mode in ("nonauto", "auto"):
        v = tau_prediction(2, mode)
        assert math.isfinite(v) and v > 0
    # sum_m H_m/m = (H_N^2 + H_N^(2))/2 exactly
    n = 1024
    h2 = float(np.sum(1.0 / np.arange(1, n + 1) ** 2))
    assert math.isclose(tau_prediction(n, "auto"), 2 * n / (harmonic(n) ** 2 + h2), rel_tol=1e-12)
    # the 2N/(ln N)^2 form is the leading asymptote; the gamma/ln N correction is still ~17% at N = 1024
    big = 2 ** 20
    assert abs(tau_prediction(big, "auto") / (2 * big / math.log(big) ** 2) - 1) < 0.2
    with pytest.raises(ValueError):
        tau_prediction(1)


def test_ensemble_rows_and_rates(ens):
    rows = ens.rows(3)
    assert [r["quantity"] for r in rows][:3] == ["F_d"] * 3
    q = {r["quantity"]: r for r in rows}
    assert q["L1gen"]["estimate"] > q["L2gen"]["estimate"]
    assert all(r["sem"] > 0 for r in rows)
    rate, sem = wa_decay_rate(ens)
    assert rate > 0 and sem > 0


def test_empirical_beta_rate_matches_theory():
    n = 64
    log, _ = sa_train(SATrainConfig(n=n, iters=300, batch=256, variant="constrained", seed=0))
    slope = np.polyfit(log["iter"][50:], log["beta"][50:], 1)[0]
    theory = 0.073 * harmonic(n) / (3 * n)
    assert 0.5 < slope / theory < 2
