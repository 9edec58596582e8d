import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nested_mlmc.estimators import (
    LevelAccumulator,
    LevelSample,
    MethodKind,
    accumulate,
    level_sample_antithetic,
    level_sample_qmc,
    level_sample_smoothed,
    level_sample_std,
    nested_estimate,
    nested_indicators,
    sample_level,
    sample_levels,
    telescope,
)
from nested_mlmc.model import inner_size
from nested_mlmc.smoothing import analytic_smoothed_indicator

LEVEL_METHODS = [MethodKind.STD_MLMC, MethodKind.SMOOTHED_MLMC, MethodKind.SMOOTHED_AMLMC,
                 MethodKind.SMOOTHED_MLQMC, MethodKind.SMOOTHED_AMLQMC]


def _joint(a, b):
    return math.sqrt(np.var(a) / a.size + np.var(b) / b.size)


# --- MethodKind ---------------------------------------------------------------------


def test_method_parse():
    assert MethodKind.parse("smoothedamlqmc") is MethodKind.SMOOTHED_AMLQMC
    assert MethodKind.SMOOTHED_AMLQMC.qmc and MethodKind.SMOOTHED_AMLQMC.antithetic
    assert not MethodKind.STD_MLMC.smoothed
    with pytest.raises(ValueError, match="unknown method"):
        MethodKind.parse("MLMC")


# --- degenerate models --------------------------------------------------------------


@pytest.mark.parametrize("method", LEVEL_METHODS)
@pytest.mark.parametrize("level", [1, 3])
def test_frozen_inner_gives_zero_differences(flat4, method, level):
    b = sample_level(flat4, method, level, 0, 500, 1)
    assert np.all(b.y == 0.0)


def test_frozen_model_std(frozen4):
    b = sample_level(frozen4, MethodKind.STD_MLMC, 2, 0, 200, 1)
    assert np.all(b.y == 0.0)
    b0 = sample_level(frozen4, MethodKind.STD_MLMC, 0, 0, 200, 1)
    assert set(np.unique(b0.y)) <= {0.0, 1.0}


def test_level_zero_ranges(spec4):
    out = sample_levels(spec4, LEVEL_METHODS, 0, 0, 2000, 3)
    assert set(np.unique(out[MethodKind.STD_MLMC].y)) <= {0.0, 1.0}
    for mk in LEVEL_METHODS[1:]:
        y = out[mk].y
        assert np.all((y >= 0) & (y <= 1))


@pytest.mark.parametrize("level", [1, 4])
def test_smoothed_bounded(spec4, level):
    out = sample_levels(spec4, LEVEL_METHODS, level, 0, 3000, 4)
    for mk, b in out.items():
        assert np.all(np.abs(b.y) <= 1.0)
        assert np.all(b.cost >= inner_size(level)), mk


def test_single_sample_wrappers(spec4):
    for fn in (level_sample_std, level_sample_smoothed, level_sample_antithetic, level_sample_qmc):
        s = fn(spec4, 2, 17, 5)
        assert isinstance(s, LevelSample) and s.cost >= 128 and -1 <= s.y <= 1
    with pytest.raises(ValueError):
        level_sample_antithetic(spec4, 0, 0, 5)
    assert level_sample_std(spec4, 0, 3, 5).y in (0.0, 1.0)


def test_method_guards(spec4):
    with pytest.raises(ValueError, match="NestedMC"):
        sample_level(spec4, MethodKind.NESTED_MC, 1, 0, 5, 0)
    with pytest.raises(ValueError, match="closed form"):
        sample_level(spec4, MethodKind.SMOOTHED_MLMC, 1, 0, 5, 0, exact_first=False)


def test_std_cost_is_inner_size(spec4):
    b = sample_level(spec4, MethodKind.STD_MLMC, 3, 0, 100, 0)
    assert np.all(b.cost == 256)


# --- coupling and symmetry -----------------------------------------------------------


def test_antithetic_symmetric_in_halves(spec4):
    # swapping the halves swaps which half feeds the plain coarse term, never the average
    from nested_mlmc.estimators import _terms
    from nested_mlmc.smoothing import SmoothingParams

    rng = np.random.default_rng(0)
    omega = 100 * np.exp(0.1 * rng.standard_normal((200, 4)))
    half = np.abs(rng.normal(40, 8, (200, 2))) * 64
    a = _terms(spec4, MethodKind.SMOOTHED_AMLMC, 2, 128, omega, half, SmoothingParams(), True)
    b = _terms(spec4, MethodKind.SMOOTHED_AMLMC, 2, 128, omega, half[:, ::-1], SmoothingParams(), True)
    assert np.allclose(a.y, b.y, atol=1e-12)
    assert np.array_equal(a.fine, b.fine)


def test_determinism_and_windows(spec4):
    full = sample_levels(spec4, LEVEL_METHODS, 2, 0, 400, 8)
    part = sample_levels(spec4, LEVEL_METHODS, 2, 150, 50, 8)
    for mk in LEVEL_METHODS:
        assert np.array_equal(full[mk].y[150:200], part[mk].y)
        assert np.array_equal(full[mk].cost[150:200], part[mk].cost)
    one = level_sample_smoothed(spec4, 2, 170, 8)
    assert one.y == full[MethodKind.SMOOTHED_MLMC].y[170]


def test_chunking_invariance(spec4, monkeypatch):
    import nested_mlmc.estimators as est

    ref = sample_levels(spec4, LEVEL_METHODS, 3, 0, 300, 2)
    monkeypatch.setattr(est, "_CHUNK_WORDS", 1000)
    again = sample_levels(spec4, LEVEL_METHODS, 3, 0, 300, 2)
    for mk in LEVEL_METHODS:
        assert np.array_equal(ref[mk].y, again[mk].y)


def test_coupling_consistency(spec4):
    # fine term at level l and coarse term at level l + 1 estimate the same mean
    n = 10**5
    for level in (1, 2, 3):
        lo = sample_levels(spec4, LEVEL_METHODS[:3], level, 0, n, 21)
        hi = sample_levels(spec4, LEVEL_METHODS[:3], level + 1, 0, n, 21)
        for mk in LEVEL_METHODS[:3]:
            f, c = lo[mk].fine, hi[mk].coarse
            assert abs(f.mean() - c.mean()) < 3 * _joint(f, c), (mk, level)


@pytest.fixture(scope="module")
def million_level2(spec4):
    methods = [MethodKind.STD_MLMC, MethodKind.SMOOTHED_MLMC, MethodKind.SMOOTHED_AMLMC]
    return sample_levels(spec4, methods, 2, 0, 10**6, 2024)


def test_std_coupling_oracle(spec4, million_level2):
    # independent plain nested estimates of E[g_128] and E[g_64]
    y = million_level2[MethodKind.STD_MLMC].y
    g_fine = nested_indicators(spec4, 128, 0, 10**6, 3)
    g_coarse = nested_indicators(spec4, 64, 0, 10**6, 4)
    diff = g_fine.mean() - g_coarse.mean()
    joint = math.sqrt(y.var() / y.size + g_fine.var() / 1e6 + g_coarse.var() / 1e6)
    assert abs(y.mean() - diff) < 3 * joint


def test_smoothed_bias_neutral(million_level2):
    y = million_level2[MethodKind.STD_MLMC].y
    yh = million_level2[MethodKind.SMOOTHED_MLMC].y
    assert abs(y.mean() - yh.mean()) < 3 * _joint(y, yh)


def test_antithetic_same_mean(million_level2):
    a = million_level2[MethodKind.SMOOTHED_AMLMC].y
    s = million_level2[MethodKind.SMOOTHED_MLMC].y
    assert abs(a.mean() - s.mean()) < 3 * _joint(a, s)


def test_variance_ordering_level4(spec4):
    out = sample_levels(spec4, LEVEL_METHODS[:3], 4, 0, 10**5, 31)
    v = {mk: b.y.var() for mk, b in out.items()}
    assert v[MethodKind.SMOOTHED_MLMC] < v[MethodKind.STD_MLMC]
    assert v[MethodKind.SMOOTHED_AMLMC] <= v[MethodKind.SMOOTHED_MLMC]


def test_qmc_net_versus_pseudo_random(spec4):
    n = 2 * 10**4
    net = sample_level(spec4, MethodKind.SMOOTHED_MLQMC, 2, 0, n, 6).y
    prn = sample_level(spec4, MethodKind.SMOOTHED_MLQMC, 2, 0, n, 6, source="pseudo-random").y
    plain = sample_level(spec4, MethodKind.SMOOTHED_MLMC, 2, 0, n, 6).y
    assert np.array_equal(prn, plain)
    # level means legitimately differ: nets shrink the inner bias at both m and m/2
    assert not np.array_equal(net, plain) and np.all(np.abs(net) <= 1)


def test_qmc_requires_power_of_two(spec4):
    with pytest.raises(ValueError, match="power-of-two"):
        sample_level(spec4, MethodKind.SMOOTHED_MLQMC, 1, 0, 5, 0, m0=24)


# --- nested Monte Carlo ----------------------------------------------------------------


def test_nested_sure_and_empty_events(spec4):
    sure = spec4.replace(c=-10 * spec4.V0)
    empty = spec4.replace(c=1e12)
    assert nested_estimate(sure, 500, 32, 1).estimate == 1.0
    r = nested_estimate(empty, 500, 32, 1)
    assert r.estimate == 0.0 and r.cost == 500 * 32 and r.half_width == 0.0


def test_nested_d1_closed_form(spec1):
    # with d = 1 the event is {omega_1 <= root}; its probability is available exactly
    exact = analytic_smoothed_indicator(spec1, spec1.V0 - spec1.c)
    r = nested_estimate(spec1, 10**5, 4096, 17, exact_first=False)
    assert abs(r.estimate - exact) < 1.5 * r.half_width
    r_exact = nested_estimate(spec1, 10**5, 4096, 17)
    assert abs(r_exact.estimate - exact) < 1.5 * r_exact.half_width


def test_nested_rejects_bad_sizes(spec4):
    with pytest.raises(ValueError):
        nested_estimate(spec4, 0, 32, 0)
    with pytest.raises(ValueError):
        nested_estimate(spec4, 10, 0, 0)


# --- accumulator ---------------------------------------------------------------------------


def test_accumulator_single_sample():
    acc = accumulate(LevelAccumulator(2), LevelSample(0.25, 128))
    assert acc.mean == 0.25 and acc.variance == 0.0 and acc.cost_units == 128
    assert acc.reported_kurtosis() is None and math.isnan(acc.kurtosis())


def test_accumulator_rejects_non_finite():
    acc = LevelAccumulator()
    with pytest.raises(ValueError, match="non-finite level sample at position 1"):
        acc.add_batch([0.1, math.nan, 0.2])
    assert acc.n == 0
    with pytest.raises(ValueError):
        acc.add(math.inf)


def test_accumulator_matches_two_pass():
    y = np.random.default_rng(5).standard_t(5, 20000) * 1e-3 + 0.02
    acc = LevelAccumulator()
    acc.add_batch(y, np.full(y.size, 7))
    dev = y - y.mean()
    assert acc.mean == pytest.approx(y.mean(), rel=1e-13)
    assert acc.variance == pytest.approx(y.var(ddof=1), rel=1e-10)
    assert acc.kurtosis() == pytest.approx(np.mean(dev ** 4) / np.mean(dev ** 2) ** 2, rel=1e-10)
    assert acc.cost_per_sample == 7


def test_kurtosis_bernoulli_two_pass():
    y = (np.random.default_rng(1).random(50000) < 0.03).astype(float)
    acc = LevelAccumulator()
    acc.add_batch(y)
    dev = y - y.mean()
    assert acc.kurtosis() == pytest.approx(np.mean(dev ** 4) / np.mean(dev ** 2) ** 2, rel=1e-10)


def test_gaussian_kurtosis():
    from nested_mlmc.numkit import RngStream

    acc = LevelAccumulator()
    acc.add_batch(RngStream(9, 9).normals(0, 10**6))
    assert abs(acc.kurtosis() - 3.0) < 0.05
    assert acc.reported_kurtosis() == acc.kurtosis()


def test_cancellation_resistant_variance():
    # tiny spread on a large offset: naive s2/n - mean^2 loses every digit
    y = 1e8 + np.array([0.0, 1e-6, 2e-6, 3e-6])
    acc = LevelAccumulator()
    acc.add_batch(y)
    assert acc.variance == pytest.approx(np.var(y - 1e8, ddof=1), rel=1e-6)


_floats = st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=40)


def _acc(values, level=0):
    a = LevelAccumulator(level)
    a.add_batch(values)
    return a


@given(_floats, _floats, _floats)
def test_merge_associative_commutative(a, b, c):
    x, y, z = _acc(a), _acc(b), _acc(c)
    left = x.merge(y).merge(z)
    right = x.merge(y.merge(z))
    swapped = z.merge(x).merge(y)
    serial = _acc(a + b + c)
    for other in (right, swapped, serial):
        assert left.n == other.n
        assert left.sums() == other.sums()
        assert left.mean == other.mean and left.variance == other.variance


@given(st.lists(st.floats(-1, 1), min_size=4, max_size=60))
def test_moment_invariants(values):
    acc = _acc(values)
    assert acc.variance >= 0.0
    if acc.variance > 0:
        k = acc.kurtosis()
        # NaN only when y^4 underflows, far below any level sample
        assert k >= 1.0 or math.isnan(k)


_moderate = st.one_of(st.just(0.0), st.floats(1e-60, 1.0), st.floats(-1.0, -1e-60))


@given(st.lists(_moderate, min_size=4, max_size=60))
def test_kurtosis_defined_in_exact_range(values):
    acc = _acc(values)
    if acc.variance > 0:
        assert acc.kurtosis() >= 1.0


def test_merge_requires_same_level():
    with pytest.raises(ValueError):
        LevelAccumulator(1).merge(LevelAccumulator(2))


# --- telescoping -----------------------------------------------------------------------------


def test_telescope_examples():
    assert telescope([0.42]).estimate == 0.42
    assert telescope([0.3, 0.02, -0.005]).estimate == pytest.approx(0.315, abs=1e-15)
    t = telescope([0.01, -0.03])
    assert t.estimate == 0.0 and t.raw == pytest.approx(-0.02)
    assert telescope([0.9, 0.2]).estimate == 1.0
    with pytest.raises(ValueError):
        telescope([])
