"""Coupled level-difference samplers and per-level moment accumulation.

Level ``l`` uses ``m_l = m0 * 2**l`` inner samples per scenario.  The fine
estimator of a level uses the full inner batch; the coarse estimator uses
its first half, and the antithetic coarse estimator averages the estimators
built from the two halves.  Every estimator of one level is computed from
the same two half-batch payoff sums, which is what couples them.

Randomness is addressed, never consumed: outer sample ``i`` of level ``l``
always reads the same window of the same counter-based stream, so a batch
of samples is identical however it is split into chunks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterable, NamedTuple

import numba
import numpy as np

from .model import (
    InnerLayout,
    ModelSpec,
    bs_call_price,
    inner_half_sums,
    inner_size,
    outer_map,
)
from .numkit import RngStream, scramble_directions, sobol_direction_numbers
from .smoothing import SmoothingParams, analytic_smoothed_batch, numerical_smoothed_batch

__all__ = [
    "MethodKind",
    "LevelBatch",
    "LevelSample",
    "LevelAccumulator",
    "NestedResult",
    "Telescoped",
    "sample_level",
    "sample_levels",
    "level_sample_std",
    "level_sample_smoothed",
    "level_sample_antithetic",
    "level_sample_qmc",
    "nested_estimate",
    "accumulate",
    "telescope",
    "stream_id",
]


class MethodKind(str, Enum):
    NESTED_MC = "NestedMC"
    STD_MLMC = "StdMLMC"
    SMOOTHED_MLMC = "SmoothedMLMC"
    SMOOTHED_AMLMC = "SmoothedAMLMC"
    SMOOTHED_MLQMC = "SmoothedMLQMC"
    SMOOTHED_AMLQMC = "SmoothedAMLQMC"

    @property
    def smoothed(self) -> bool:
        return self.value.startswith("Smoothed")

    @property
    def antithetic(self) -> bool:
        return self in (MethodKind.SMOOTHED_AMLMC, MethodKind.SMOOTHED_AMLQMC)

    @property
    def qmc(self) -> bool:
        return self in (MethodKind.SMOOTHED_MLQMC, MethodKind.SMOOTHED_AMLQMC)

    @classmethod
    def parse(cls, name) -> "MethodKind":
        if isinstance(name, cls):
            return name
        for kind in cls:
            if kind.value.lower() == str(name).lower():
                return kind
        raise ValueError(f"unknown method {name!r}; expected one of "
                         f"{[k.value for k in cls]}")


_OUTER, _INNER, _SCRAMBLE, _NESTED_OUTER, _NESTED_INNER = 1, 2, 3, 4, 5
_CHUNK_WORDS = 1 << 21


def stream_id(level: int, purpose: int) -> int:
    return (purpose << 32) | level


# ---------------------------------------------------------------------------
# Simulation of outer scenarios and inner half sums
# ---------------------------------------------------------------------------


def _scrambled_dirs(stream: RngStream, start: int, count: int, f: int, k: int):
    raw = stream.raw(start * f * 33, count * f * 33).reshape(count * f, 33)
    v = np.tile(sobol_direction_numbers(f, k), (count, 1))
    dirs = np.empty((count * f, k), dtype=np.uint64)
    shifts = np.empty(count * f, dtype=np.uint64)
    scramble_directions(v, raw[:, :32], raw[:, 32], dirs, shifts)
    return dirs.reshape(count, f, k), shifts.reshape(count, f)


def _simulate(spec: ModelSpec, m: int, start: int, count: int, seed: int, *,
              level_key: int, outer_purpose: int, inner_purpose: int,
              source: str, exact_first: bool):
    """Scenarios and half-batch payoff sums for outer indices ``start .. start+count-1``."""
    layout = InnerLayout.for_spec(spec, exact_first)
    f = layout.n_factors(spec)
    d = spec.d
    z = RngStream(seed, stream_id(level_key, outer_purpose)).normals(start * d, count * d)
    omega = outer_map(spec, z.reshape(count, d))
    half = np.zeros((count, 2))
    if f == 0 or count == 0:
        return omega, half
    if source == "scrambled-net":
        if m & (m - 1):
            raise ValueError(f"scrambled nets need a power-of-two inner size, got {m}")
        k = m.bit_length() - 1
        stream = RngStream(seed, stream_id(level_key, _SCRAMBLE))
        step = max(1, _CHUNK_WORDS // (m * f))
        for a in range(0, count, step):
            b = min(count, a + step)
            dirs, shifts = _scrambled_dirs(stream, start + a, b - a, f, k)
            half[a:b] = inner_half_sums(spec, omega[a:b], m, layout, dirs=dirs, shifts=shifts)
    elif source == "pseudo-random":
        stream = RngStream(seed, stream_id(level_key, inner_purpose))
        block = m * f
        step = max(1, _CHUNK_WORDS // block)
        for a in range(0, count, step):
            b = min(count, a + step)
            raw = stream.raw((start + a) * block, (b - a) * block).reshape(b - a, block)
            half[a:b] = inner_half_sums(spec, omega[a:b], m, layout, raw=raw)
    else:
        raise ValueError(f"unknown inner source {source!r}")
    return omega, half


# ---------------------------------------------------------------------------
# Level samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LevelBatch:
    """Fine and coarse terms of a run of consecutive outer samples."""

    level: int
    fine: np.ndarray
    coarse: np.ndarray
    cost: np.ndarray

    @property
    def y(self) -> np.ndarray:
        return self.fine - self.coarse

    def __len__(self):
        return self.fine.shape[0]


class LevelSample(NamedTuple):
    y: float
    cost: int


def _smooth(spec, budget, params, x0):
    if params.mode == "analytic":
        h, roots, iters = analytic_smoothed_batch(spec, budget, params, x0)
        return h, roots, iters
    h, roots, iters = numerical_smoothed_batch(spec, budget, params, x0)
    return h, roots, iters + params.m_lag * (budget > 0.0)


def _terms(spec: ModelSpec, method: MethodKind, level: int, m: int, omega, half,
           params: SmoothingParams, exact_first: bool) -> LevelBatch:
    n = omega.shape[0]
    fine_mean = (half[:, 0] + half[:, 1]) / m
    mc = m // 2
    first_mean = half[:, 0] / mc
    second_mean = half[:, 1] / mc
    budget0 = spec.V0 - spec.c
    cost = np.full(n, m, dtype=np.int64)
    if not method.smoothed:
        if exact_first:
            call1 = bs_call_price(omega[:, 0], spec.K[0], spec.mu0, spec.vols[0],
                                  spec.horizon_gap)
            base = budget0 - call1
        else:
            base = np.full(n, budget0)
        fine = (base - fine_mean > 0.0).astype(np.float64)
        coarse = (base - first_mean > 0.0).astype(np.float64) if level else np.zeros(n)
        return LevelBatch(level, fine, coarse, cost)

    x0 = np.ascontiguousarray(omega[:, 0])
    fine, roots, iters = _smooth(spec, budget0 - fine_mean, params, x0)
    cost += iters
    if level == 0:
        return LevelBatch(level, fine, np.zeros(n), cost)
    warm = np.where(roots > 0.0, roots, x0)
    coarse, _, iters = _smooth(spec, budget0 - first_mean, params, warm)
    cost += iters
    if method.antithetic:
        partner, _, iters = _smooth(spec, budget0 - second_mean, params, warm)
        cost += iters
        coarse = 0.5 * (coarse + partner)
    return LevelBatch(level, fine, coarse, cost)


def _default_source(method: MethodKind) -> str:
    return "scrambled-net" if method.qmc else "pseudo-random"


def sample_levels(spec: ModelSpec, methods: Iterable, level: int, start: int, count: int,
                  seed: int, params: SmoothingParams = SmoothingParams(), *,
                  m0: int = 32, source: str | None = None,
                  exact_first: bool | None = None) -> dict:
    """Level samples of several methods from shared random numbers.

    Methods using the same inner source (pseudo-random or scrambled net)
    see the same scenarios and inner payoffs, so their differences are
    pure method effects.  Returns ``{MethodKind: LevelBatch}``.
    """
    methods = [MethodKind.parse(mk) for mk in methods]
    if exact_first is None:
        exact_first = spec.separable
    if level < 0 or start < 0 or count < 0:
        raise ValueError("level, start and count must be non-negative")
    for mk in methods:
        if mk is MethodKind.NESTED_MC:
            raise ValueError("NestedMC has no level structure; use nested_estimate")
        if mk.smoothed and not exact_first:
            raise ValueError("smoothed methods price the first asset in closed form")
    m = inner_size(level, m0)
    if m < 2:
        raise ValueError("coupled levels need at least two inner samples")
    out = {}
    by_source: dict[str, list] = {}
    for mk in methods:
        by_source.setdefault(source or _default_source(mk), []).append(mk)
    for src, group in by_source.items():
        omega, half = _simulate(spec, m, start, count, seed, level_key=level,
                                outer_purpose=_OUTER, inner_purpose=_INNER,
                                source=src, exact_first=exact_first)
        for mk in group:
            out[mk] = _terms(spec, mk, level, m, omega, half, params, exact_first)
    return out


def sample_level(spec: ModelSpec, method, level: int, start: int, count: int, seed: int,
                 params: SmoothingParams = SmoothingParams(), **kw) -> LevelBatch:
    """Samples ``start .. start+count-1`` of one method's level-``level`` difference."""
    mk = MethodKind.parse(method)
    return sample_levels(spec, [mk], level, start, count, seed, params, **kw)[mk]


def _one(spec, method, level, outer_index, seed, params, **kw) -> LevelSample:
    b = sample_level(spec, method, level, outer_index, 1, seed, params, **kw)
    return LevelSample(float(b.y[0]), int(b.cost[0]))


def level_sample_std(spec: ModelSpec, level: int, outer_index: int, seed: int,
                     **kw) -> LevelSample:
    """``1{fine loss > c} - 1{coarse loss > c}`` for one scenario."""
    return _one(spec, MethodKind.STD_MLMC, level, outer_index, seed, SmoothingParams(), **kw)


def level_sample_smoothed(spec: ModelSpec, level: int, outer_index: int, seed: int,
                          params: SmoothingParams = SmoothingParams(), **kw) -> LevelSample:
    return _one(spec, MethodKind.SMOOTHED_MLMC, level, outer_index, seed, params, **kw)


def level_sample_antithetic(spec: ModelSpec, level: int, outer_index: int, seed: int,
                            params: SmoothingParams = SmoothingParams(), **kw) -> LevelSample:
    if level < 1:
        raise ValueError("the antithetic difference is defined for level >= 1")
    return _one(spec, MethodKind.SMOOTHED_AMLMC, level, outer_index, seed, params, **kw)


def level_sample_qmc(spec: ModelSpec, level: int, outer_index: int, seed: int,
                     params: SmoothingParams = SmoothingParams(), antithetic: bool = False,
                     **kw) -> LevelSample:
    method = MethodKind.SMOOTHED_AMLQMC if antithetic else MethodKind.SMOOTHED_MLQMC
    return _one(spec, method, level, outer_index, seed, params, **kw)


# ---------------------------------------------------------------------------
# Plain nested Monte Carlo
# ---------------------------------------------------------------------------


class NestedResult(NamedTuple):
    estimate: float
    half_width: float
    cost: int


def nested_indicators(spec: ModelSpec, m: int, start: int, count: int, seed: int, *,
                      exact_first: bool | None = None) -> np.ndarray:
    """Indicators ``1{loss estimate > c}`` of outer samples ``start ..``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if exact_first is None:
        exact_first = spec.separable
    omega, half = _simulate(spec, m, start, count, seed, level_key=m,
                            outer_purpose=_NESTED_OUTER, inner_purpose=_NESTED_INNER,
                            source="pseudo-random", exact_first=exact_first)
    mean = (half[:, 0] + half[:, 1]) / m
    base = spec.V0 - spec.c
    if exact_first:
        base = base - bs_call_price(omega[:, 0], spec.K[0], spec.mu0, spec.vols[0],
                                    spec.horizon_gap)
    return (base - mean > 0.0).astype(np.float64)


def nested_estimate(spec: ModelSpec, n: int, m: int, seed: int, *,
                    exact_first: bool | None = None) -> NestedResult:
    """Nested Monte Carlo estimate of the loss probability.

    ``half_width`` is 1.96 standard errors.  The cost is ``n * m`` inner
    payoff evaluations.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    g = nested_indicators(spec, m, 0, n, seed, exact_first=exact_first)
    p = float(np.mean(g))
    se = float(np.std(g, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return NestedResult(p, 1.96 * se, n * m)


# ---------------------------------------------------------------------------
# Exact running sums and the level accumulator
# ---------------------------------------------------------------------------

_PARTIALS = 96


@numba.njit(cache=True)
def _grow_one(partials, count, x):
    # Shewchuk's non-overlapping expansion: the partials sum to the exact total.
    i = 0
    for j in range(count):
        y = partials[j]
        if abs(x) < abs(y):
            x, y = y, x
        hi = x + y
        lo = y - (hi - x)
        if lo != 0.0:
            partials[i] = lo
            i += 1
        x = hi
    partials[i] = x
    return i + 1


@numba.njit(cache=True)
def _grow(partials, count, values):
    for v in values:
        count = _grow_one(partials, count, v)
    return count


@numba.njit(cache=True)
def _two_prod(a, b):
    # Dekker: a * b == p + e exactly, barring overflow and underflow.
    p = a * b
    t = 134217729.0 * a
    ah = t - (t - a)
    al = a - ah
    t = 134217729.0 * b
    bh = t - (t - b)
    bl = b - bh
    e = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    return p, e


@numba.njit(cache=True)
def _grow_powers(p1, p2, p3, p4, counts, values):
    # Adds y, y^2, y^3, y^4 with every power kept as an exact expansion.
    t3 = np.empty(4)
    for v in values:
        counts[0] = _grow_one(p1, counts[0], v)
        a, b = _two_prod(v, v)
        counts[1] = _grow_one(p2, counts[1], a)
        counts[1] = _grow_one(p2, counts[1], b)
        t3[0], t3[1] = _two_prod(v, a)
        t3[2], t3[3] = _two_prod(v, b)
        for k in range(4):
            counts[2] = _grow_one(p3, counts[2], t3[k])
            x, y = _two_prod(v, t3[k])
            counts[3] = _grow_one(p4, counts[3], x)
            counts[3] = _grow_one(p4, counts[3], y)
    return counts


class ExactSum:
    """A floating-point sum kept exactly, so merges are order-independent."""

    __slots__ = ("_p", "_n")

    def __init__(self):
        self._p = np.zeros(_PARTIALS)
        self._n = 0

    def add(self, values):
        self._n = _grow(self._p, self._n, np.ascontiguousarray(values, dtype=np.float64).ravel())

    def merge(self, other: "ExactSum"):
        self.add(other._p[: other._n].copy())

    def copy(self) -> "ExactSum":
        out = ExactSum()
        out._p[:] = self._p
        out._n = self._n
        return out

    @property
    def value(self) -> float:
        return math.fsum(self._p[: self._n])

    @property
    def exact(self) -> Fraction:
        return sum((Fraction(float(x)) for x in self._p[: self._n]), Fraction(0))


class LevelAccumulator:
    """Streaming sums of ``Y, Y^2, Y^3, Y^4`` and cost for one level.

    Powers and sums are exact (for ``1e-75 < |y| < 1e75``), so the moments
    do not depend on the order in which samples or partial accumulators are
    combined.  Moments are evaluated in
    rational arithmetic from the exact sums.
    """

    def __init__(self, level: int = 0):
        self.level = level
        self.n = 0
        self.cost_units = 0
        self._sums = [ExactSum() for _ in range(4)]

    def add(self, y: float, cost: int = 0):
        self.add_batch(np.array([y], dtype=np.float64), np.array([cost]))

    def add_batch(self, ys, costs=None):
        ys = np.asarray(ys, dtype=np.float64).ravel()
        if not np.all(np.isfinite(ys)):
            bad = int(np.flatnonzero(~np.isfinite(ys))[0])
            raise ValueError(f"non-finite level sample at position {bad}: {ys[bad]!r}")
        if costs is not None:
            costs = np.asarray(costs).ravel()
            if costs.shape != ys.shape:
                raise ValueError("costs must match samples")
            self.cost_units += int(np.sum(costs, dtype=np.int64))
        sums = self._sums
        counts = np.array([x._n for x in sums], dtype=np.int64)
        _grow_powers(sums[0]._p, sums[1]._p, sums[2]._p, sums[3]._p, counts, ys)
        for x, c in zip(sums, counts):
            x._n = int(c)
        self.n += ys.shape[0]

    def add_level_batch(self, batch: LevelBatch):
        self.add_batch(batch.y, batch.cost)

    def merge(self, other: "LevelAccumulator") -> "LevelAccumulator":
        if other.level != self.level:
            raise ValueError("cannot merge accumulators of different levels")
        out = LevelAccumulator(self.level)
        out.n = self.n + other.n
        out.cost_units = self.cost_units + other.cost_units
        out._sums = [a.copy() for a in self._sums]
        for a, b in zip(out._sums, other._sums):
            a.merge(b)
        return out

    def sums(self) -> tuple:
        return tuple(s.value for s in self._sums)

    def _central(self):
        n = self.n
        s1, s2, s3, s4 = (s.exact for s in self._sums)
        mu = s1 / n
        m2 = s2 / n - mu * mu
        m4 = s4 / n - 4 * mu * s3 / n + 6 * mu * mu * s2 / n - 3 * mu ** 4
        return mu, m2, m4

    @property
    def mean(self) -> float:
        if self.n == 0:
            return math.nan
        return float(self._sums[0].exact / self.n)

    @property
    def variance(self) -> float:
        """Unbiased sample variance (0 for a single sample)."""
        if self.n == 0:
            return math.nan
        if self.n == 1:
            return 0.0
        _, m2, _ = self._central()
        return float(m2 * self.n / (self.n - 1))

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance / self.n) if self.n else math.nan

    def kurtosis(self) -> float:
        """``E[(Y - mean)^4] / Var[Y]^2`` with population moments; NaN if undefined."""
        if self.n < 2:
            return math.nan
        _, m2, m4 = self._central()
        if m2 == 0:
            return math.nan
        k = m4 / (m2 * m2)
        # below 1 is impossible; only reachable when y^4 underflowed
        return float(k) if k >= 1 else math.nan

    def reported_kurtosis(self, min_samples: int = 100) -> float | None:
        """Kurtosis, or ``None`` when too few samples or a negligible variance."""
        var = self.variance
        if self.n < min_samples or not var > 1e-12 * max(self.mean ** 2, 1e-300):
            return None
        return self.kurtosis()

    @property
    def cost_per_sample(self) -> float:
        return self.cost_units / self.n if self.n else math.nan

    def __repr__(self):
        return (f"LevelAccumulator(level={self.level}, n={self.n}, mean={self.mean:.6g}, "
                f"variance={self.variance:.6g}, cost_units={self.cost_units})")


def accumulate(acc: LevelAccumulator, sample: LevelSample) -> LevelAccumulator:
    """Add one :class:`LevelSample` to ``acc`` and return it."""
    acc.add(sample.y, sample.cost)
    return acc


class Telescoped(NamedTuple):
    estimate: float
    raw: float


def telescope(per_level_means) -> Telescoped:
    """Sum of level means; ``estimate`` is clamped to [0, 1], ``raw`` is not."""
    means = list(per_level_means)
    if not means:
        raise ValueError("need at least one level")
    raw = math.fsum(means)
    return Telescoped(min(max(raw, 0.0), 1.0), raw)
