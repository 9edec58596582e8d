import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nested_mlmc.model import (
    InnerBatch,
    InnerLayout,
    ModelSpec,
    Scenario,
    bs_call_delta,
    bs_call_price,
    conditional_loss,
    initial_value,
    inner_half_sums,
    inner_loss_estimate,
    inner_payoff,
    inner_size,
    outer_map,
    paper_covariance,
    paper_model,
    sample_inner_batch,
    sample_outer,
)
from nested_mlmc.numkit import RngStream, raw_to_uniform, std_normal_inv_cdf

VOL = math.sqrt(0.3)


def test_level_schedule():
    assert [inner_size(l) for l in range(4)] == [32, 64, 128, 256]
    assert inner_size(6) == 2048


# --- spec validation ------------------------------------------------------------


def test_paper_model_shape(spec4):
    assert spec4.d == 4 and spec4.separable
    assert np.allclose(spec4.sigma @ spec4.sigma.T, paper_covariance(4), atol=1e-15)
    assert np.allclose(spec4.vols, VOL)
    assert spec4.c == pytest.approx(0.5 * spec4.V0)


@pytest.mark.parametrize("tau,T", [(0.1, 0.1), (0.2, 0.1), (0.0, 0.1)])
def test_tau_must_precede_T(tau, T):
    with pytest.raises(ValueError, match="tau < T"):
        paper_model(2, T=T, tau=tau)


def test_invalid_prices_rejected(spec4):
    with pytest.raises(ValueError):
        spec4.replace(S0=[100, -1, 100, 100])
    with pytest.raises(ValueError):
        spec4.replace(K=[95, 95, 0, 95])
    with pytest.raises(ValueError, match="lower triangular"):
        spec4.replace(sigma=np.ones((4, 4)))


def test_round_trip_dict(spec4):
    again = ModelSpec.from_dict(spec4.to_dict())
    assert np.array_equal(again.sigma, spec4.sigma) and again.V0 == spec4.V0


def test_non_separable_model():
    C = 0.3 * 0.5 ** np.abs(np.subtract.outer(np.arange(3), np.arange(3)))
    from nested_mlmc.numkit import cholesky

    spec = paper_model(3).replace(sigma=cholesky(C))
    assert not spec.separable


# --- closed-form pricing ---------------------------------------------------------


def test_call_price_limits():
    assert bs_call_price(1e-8, 95, 0.05, VOL, 0.08) < 1e-12
    assert bs_call_price(100, 1e-9, 0.05, VOL, 0.08) == pytest.approx(100, abs=1e-8)
    assert bs_call_price(100, 95, 0.05, 0.0, 0.08) == pytest.approx(100 - 95 * math.exp(-0.004))
    assert bs_call_price(90, 95, 0.05, 0.0, 0.08) == 0.0


def test_call_price_mc_oracle():
    s, k, r, t = 100.0, 95.0, 0.05, 0.08
    z = RngStream(31, 0).normals(0, 10**7)
    pay = math.exp(-r * t) * np.maximum(s * np.exp((r - 0.15) * t + VOL * math.sqrt(t) * z) - k, 0)
    se = pay.std() / math.sqrt(pay.size)
    assert abs(pay.mean() - bs_call_price(s, k, r, VOL, t)) < 3 * se


@pytest.mark.parametrize("args", [(0, 95, 0.05, VOL, 0.1), (100, -1, 0.05, VOL, 0.1),
                                  (100, 95, 0.05, VOL, 0.0), (100, 95, 0.05, -0.1, 0.1)])
def test_pricing_domain_errors(args):
    with pytest.raises(ValueError):
        bs_call_price(*args)
    with pytest.raises(ValueError):
        bs_call_delta(*args)


def test_delta_limits_and_fd():
    assert bs_call_delta(1e6, 1.0, 0.05, VOL, 0.08) == pytest.approx(1.0, abs=1e-15)
    assert bs_call_delta(1e-3, 95, 0.05, VOL, 0.08) < 1e-15
    h = 1e-4
    for s in (80.0, 100.0, 120.0):
        fd = (bs_call_price(s + h, 95, 0.05, VOL, 0.08) - bs_call_price(s - h, 95, 0.05, VOL, 0.08)) / (2 * h)
        assert abs(fd - bs_call_delta(s, 95, 0.05, VOL, 0.08)) < 1e-6


def test_delta_positive_on_grid():
    s = np.logspace(-3, 6, 2000)
    delta = bs_call_delta(s, 95.0, 0.05, VOL, 0.08)
    # Phi(d1) underflows to 0 in double precision once d1 < -37.5
    d1 = (np.log(s / 95.0) + (0.05 + 0.15) * 0.08) / (VOL * math.sqrt(0.08))
    assert np.all(delta[d1 > -37.5] > 0)
    assert np.all(delta >= 0) and np.all(np.diff(delta) >= 0)
    price = bs_call_price(s, 95.0, 0.05, VOL, 0.08)
    assert np.all(np.diff(price) >= -1e-300)  # denormal cancellation far out of the money


def test_initial_value_reduces_for_d1(spec1):
    assert initial_value(spec1) == bs_call_price(100, 95, 0.05, VOL, 0.1)


@given(st.floats(0.01, 100.0))
def test_initial_value_homogeneous(lam):
    spec = paper_model(4)
    scaled = spec.replace(S0=lam * spec.S0, K=lam * spec.K)
    assert initial_value(scaled) == pytest.approx(lam * initial_value(spec), rel=1e-12)


def test_initial_value_mc(spec4):
    z = RngStream(5, 1).normals(0, 4 * 2_500_000).reshape(-1, 4) @ spec4.sigma.T
    ST = spec4.S0 * np.exp((spec4.mu0 - 0.5 * spec4.vols ** 2) * spec4.T + math.sqrt(spec4.T) * z)
    pay = math.exp(-spec4.mu0 * spec4.T) * np.maximum(ST - spec4.K, 0).sum(axis=1)
    assert abs(pay.mean() - spec4.V0) < 3 * pay.std() / math.sqrt(pay.size)


# --- outer scenarios --------------------------------------------------------------


def test_outer_map_limits(spec4, frozen4):
    z0 = np.zeros(4)
    assert np.allclose(outer_map(spec4, z0), 100 * math.exp((0.08 - 0.15) * 0.02))
    assert np.allclose(sample_outer(frozen4, RngStream(1, 1)).omega, 100 * math.exp(0.08 * 0.02))


def test_sample_outer_replays(spec4):
    a = sample_outer(spec4, RngStream(3, 9), index=17)
    b = sample_outer(spec4, RngStream(3, 9), index=17)
    assert np.array_equal(a.omega, b.omega)
    assert a.omega1 == a.omega[0] and np.array_equal(a.omega_rest, a.omega[1:])
    assert np.all(a.omega > 0)
    assert np.array_equal(outer_map(spec4, a.z), a.omega)


def test_outer_map_batch_invariant(spec4):
    z = RngStream(8, 8).normals(0, 4 * 1000).reshape(-1, 4)
    full = outer_map(spec4, z)
    assert all(np.array_equal(full[i], outer_map(spec4, z[i])) for i in range(0, 1000, 97))


def test_outer_mean(spec4):
    z = RngStream(12, 0).normals(0, 4 * 10**6).reshape(-1, 4)
    w1 = outer_map(spec4, z)[:, 0]
    assert abs(w1.mean() - 100 * math.exp(0.08 * 0.02)) < 3 * w1.std() / 1000


# --- inner payoffs ----------------------------------------------------------------


def _scenario(spec, seed=4, index=0):
    return sample_outer(spec, RngStream(seed, 77), index)


def test_zero_strike_martingale(spec4):
    spec = spec4.replace(K=np.full(4, 1e-12))
    scen = _scenario(spec)
    batch = sample_inner_batch(spec, scen, RngStream(1, 2), 10**6)
    se = batch.payoffs.std() / 1000
    assert abs(batch.payoffs.mean() - scen.omega.sum()) < 3 * se
    assert np.all(batch.payoffs >= 0)


def test_deterministic_payoff(frozen4):
    scen = _scenario(frozen4)
    gap = frozen4.horizon_gap
    expected = math.exp(-0.05 * gap) * np.maximum(scen.omega * math.exp(0.05 * gap) - 95, 0).sum()
    assert inner_payoff(frozen4, scen, np.zeros(4)) == pytest.approx(expected, rel=1e-14)
    zero_k = frozen4.replace(K=np.full(4, 1e-300))
    b = sample_inner_batch(zero_k, scen, RngStream(1, 1), 5)
    assert inner_loss_estimate(zero_k, scen, b) == pytest.approx(zero_k.V0 - scen.omega.sum(), rel=1e-13)


def test_inner_payoff_mean_matches_bs(spec4):
    scen = _scenario(spec4, index=3)
    batch = sample_inner_batch(spec4, scen, RngStream(2, 2), 10**6)
    exact = bs_call_price(scen.omega, spec4.K, 0.05, spec4.vols, spec4.horizon_gap).sum()
    assert abs(batch.payoffs.mean() - exact) < 3 * batch.payoffs.std() / 1000


def test_inner_loss_estimate_edges(spec4):
    scen = _scenario(spec4)
    assert inner_loss_estimate(spec4, scen, InnerBatch(np.full(8, spec4.V0))) == 0.0
    with pytest.raises(ValueError):
        inner_loss_estimate(spec4, scen, InnerBatch(np.empty(0)))
    with pytest.raises(ValueError):
        inner_payoff(spec4, scen, np.zeros(3))


def test_conditional_loss_oracle(spec4):
    # 100 scenarios, 10^4 batches of 32 payoffs each, pooled per scenario
    stream = RngStream(6, 6)
    for i in range(0, 100, 10):
        scen = sample_outer(spec4, stream, i)
        b = sample_inner_batch(spec4, scen, RngStream(6, 100 + i), 32 * 10**4)
        est = np.array([spec4.V0 - p.mean() for p in b.payoffs.reshape(10**4, 32)])
        se = est.std() / 100
        assert abs(est.mean() - conditional_loss(spec4, scen.omega)) < 3.5 * se


# --- hot path agrees with the reference payoff ----------------------------------


@pytest.mark.parametrize("exact_first", [False, True])
def test_half_sums_match_reference(spec4, exact_first):
    layout = InnerLayout.for_spec(spec4, exact_first)
    f = layout.n_factors(spec4)
    m, n = 64, 5
    omega = outer_map(spec4, RngStream(1, 3).normals(0, 4 * n).reshape(n, 4))
    raw = RngStream(1, 4).raw(0, n * m * f).reshape(n, m * f)
    got = inner_half_sums(spec4, omega, m, layout, raw=raw)
    for i in range(n):
        w = np.zeros((m, 4))
        w[:, layout.factors] = std_normal_inv_cdf(raw_to_uniform(raw[i])).reshape(m, f)
        spec = spec4 if not exact_first else spec4.replace(K=np.array([1e300, 95, 95, 95]))
        pay = inner_payoff(spec, Scenario(np.zeros(4), omega[i]), w)
        assert got[i, 0] == pytest.approx(pay[: m // 2].sum(), rel=1e-12)
        assert got[i, 1] == pytest.approx(pay[m // 2:].sum(), rel=1e-12)


def test_layout_requires_separable():
    from nested_mlmc.numkit import cholesky

    C = 0.3 * 0.5 ** np.abs(np.subtract.outer(np.arange(3), np.arange(3)))
    spec = paper_model(3).replace(sigma=cholesky(C))
    with pytest.raises(ValueError, match="separable"):
        InnerLayout.for_spec(spec, True)
    assert InnerLayout.for_spec(spec, False).n_factors(spec) == 3
