"""Adaptive MLMC control loop, fixed-budget level studies and rate fits."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .estimators import (
    LevelAccumulator,
    MethodKind,
    nested_indicators,
    sample_levels,
    telescope,
)
from .model import ModelSpec, inner_size
from .smoothing import SmoothingParams

__all__ = [
    "RunConfig",
    "LevelRecord",
    "RunReport",
    "Rates",
    "InsufficientLevelsError",
    "optimal_allocation",
    "refit_alpha",
    "bias_converged",
    "run_mlmc",
    "fit_slope",
    "fit_rates",
    "level_study",
    "CostRow",
    "CostTable",
    "fit_cost_exponent",
    "cost_vs_tol_study",
    "PROFILES",
]

log = logging.getLogger(__name__)

# Samples drawn per call into the estimators; bounds memory, not results.
_BATCH = 1 << 17

PROFILES = {
    "desk": {"N_star": 20_000, "max_level_cap": 7},
    "paper": {"N_star": 200_000, "max_level_cap": 12},
}


@dataclass(frozen=True)
class RunConfig:
    """Parameters of one adaptive run."""

    method: MethodKind = MethodKind.SMOOTHED_MLMC
    tol: float = 1e-2
    omega_split: float = 0.16
    L0: int = 2
    N_star: int = 20_000
    m0: int = 32
    alpha: float = 1.0
    seed: int = 0
    max_level_cap: int = 7
    smoothing: SmoothingParams = field(default_factory=SmoothingParams)
    sparse_threshold: int = 100

    def __post_init__(self):
        object.__setattr__(self, "method", MethodKind.parse(self.method))
        if not 0.0 < self.omega_split < 1.0:
            raise ValueError(f"omega_split must satisfy 0 < omega_split < 1, got {self.omega_split}")
        if not self.tol > 0.0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.N_star < 2:
            raise ValueError(f"N_star must be >= 2, got {self.N_star}")
        if self.m0 < 1:
            raise ValueError(f"m0 must be >= 1, got {self.m0}")
        if not self.alpha > 0.0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.L0 < 0 or self.max_level_cap < self.L0:
            raise ValueError("need 0 <= L0 <= max_level_cap")

    @classmethod
    def profile(cls, name: str, **overrides) -> "RunConfig":
        """Config with the ``desk`` or ``paper`` profile defaults."""
        try:
            base = PROFILES[name]
        except KeyError:
            raise ValueError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}") from None
        return cls(**{**base, **overrides})

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["method"] = self.method.value
        out["smoothing"] = dataclasses.asdict(self.smoothing)
        return out


@dataclass(frozen=True)
class LevelRecord:
    level: int
    m_l: int
    N_l: int
    mean: float
    variance: float
    kurtosis: float | None
    cost_units: int
    cumulative_cost: int

    @property
    def cost_per_sample(self) -> float:
        return self.cost_units / self.N_l

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance / self.N_l)


class Rates(NamedTuple):
    alpha_hat: float
    beta_hat: float
    gamma_hat: float


@dataclass
class RunReport:
    """Outcome of :func:`run_mlmc`."""

    method: MethodKind
    levels: list[LevelRecord]
    estimate: float
    raw_estimate: float
    total_cost: int
    wall_time: float
    converged: bool
    config: dict
    model: dict
    rates: Rates | None = None
    status: str = "ok"
    message: str = ""

    @property
    def L(self) -> int:
        return self.levels[-1].level

    @property
    def statistical_error(self) -> float:
        """``sqrt(sum V_l / N_l)``."""
        return math.sqrt(math.fsum(r.variance / r.N_l for r in self.levels))

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "status": self.status,
            "message": self.message,
            "converged": self.converged,
            "estimate": self.estimate,
            "raw_estimate": self.raw_estimate,
            "L": self.L,
            "total_cost": self.total_cost,
            "wall_time": self.wall_time,
            "alpha_hat": None if self.rates is None else self.rates.alpha_hat,
            "beta_hat": None if self.rates is None else self.rates.beta_hat,
            "gamma_hat": None if self.rates is None else self.rates.gamma_hat,
            "levels": [dataclasses.asdict(r) for r in self.levels],
            "config": self.config,
            "model": self.model,
        }


class InsufficientLevelsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Allocation and bias test
# ---------------------------------------------------------------------------


def optimal_allocation(variances, costs, eps: float, omega: float, floor: int = 2) -> np.ndarray:
    """``N_l = ceil((1-omega)^-1 eps^-2 sqrt(V_l/C_l) sum_k sqrt(V_k C_k))``, at least ``floor``."""
    v = np.asarray(variances, dtype=np.float64)
    c = np.asarray(costs, dtype=np.float64)
    if v.shape != c.shape or v.ndim != 1 or v.size == 0:
        raise ValueError("variances and costs must be equal-length non-empty vectors")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError("variances must be finite and >= 0")
    if np.any(c <= 0) or not np.all(np.isfinite(c)):
        raise ValueError("costs must be finite and > 0")
    if not 0.0 < omega < 1.0:
        raise ValueError("omega must satisfy 0 < omega < 1")
    if not eps > 0.0:
        raise ValueError("eps must be > 0")
    if np.all(v == 0.0):
        log.warning("all level variances are zero; returning the floor allocation")
        return np.full(v.shape, floor, dtype=np.int64)
    total = math.fsum(np.sqrt(v * c))
    n = np.ceil(np.sqrt(v / c) * total / ((1.0 - omega) * eps * eps))
    return np.maximum(n, floor).astype(np.int64)


def refit_alpha(level_means, alpha: float, std_errors=None) -> float:
    """Weak rate from ``log2 |mean_l|`` over levels >= 1, clamped to [0.5, 2].

    Only levels whose mean exceeds three standard errors enter the fit; with
    fewer than three levels or fewer than two usable means ``alpha`` is
    returned unchanged.
    """
    means = np.asarray(level_means, dtype=np.float64)
    if means.size < 3:
        return alpha
    ell = np.arange(means.size)
    use = (ell >= 1) & (np.abs(means) > 0.0)
    if std_errors is not None:
        use &= np.abs(means) > 3.0 * np.asarray(std_errors, dtype=np.float64)
    if np.count_nonzero(use) < 2:
        return alpha
    slope = np.polyfit(ell[use], np.log2(np.abs(means[use])), 1)[0]
    return float(np.clip(-slope, 0.5, 2.0))


def bias_converged(level_means, alpha: float, eps: float, omega: float,
                   std_errors=None) -> bool:
    """``|mean_L| / (2^alpha - 1) <= sqrt(omega) * eps`` with alpha refit when possible."""
    means = np.asarray(level_means, dtype=np.float64)
    if means.size == 0:
        raise ValueError("need at least one level mean")
    if not alpha > 0.0:
        raise ValueError("alpha must be > 0")
    a = refit_alpha(means, alpha, std_errors)
    return abs(means[-1]) / (2.0 ** a - 1.0) <= math.sqrt(omega) * eps


# ---------------------------------------------------------------------------
# Rate fits
# ---------------------------------------------------------------------------


def fit_slope(x, y) -> float:
    """Least-squares slope of ``y`` against ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        raise InsufficientLevelsError("insufficient levels: need at least two points")
    return float(np.polyfit(x, y, 1)[0])


def fit_rates(report, min_samples: int = 100, levels: Iterable[int] | None = None) -> Rates:
    """Slopes of ``log2 |mean|``, ``log2 V`` and ``log2 C`` against level.

    ``report`` is a :class:`RunReport` or a sequence of :class:`LevelRecord`.
    Level 0 is excluded, as are levels with fewer than ``min_samples``
    samples; ``levels`` restricts the fit further.  Decay shows as a
    negative slope.
    """
    records = report.levels if isinstance(report, RunReport) else list(report)
    keep = set(levels) if levels is not None else None
    use = [r for r in records if r.level >= 1 and r.N_l >= min_samples
           and (keep is None or r.level in keep)]
    if len(use) < 3:
        raise InsufficientLevelsError(
            f"insufficient levels: {len(use)} usable, need 3 (level >= 1, N_l >= {min_samples})")
    ell = np.array([r.level for r in use], dtype=np.float64)
    means = np.array([abs(r.mean) for r in use])
    var = np.array([r.variance for r in use])
    cost = np.array([r.cost_per_sample for r in use])
    nz = means > 0
    alpha = fit_slope(ell[nz], np.log2(means[nz])) if np.count_nonzero(nz) >= 2 else math.nan
    vz = var > 0
    beta = fit_slope(ell[vz], np.log2(var[vz])) if np.count_nonzero(vz) >= 2 else math.nan
    return Rates(alpha, beta, fit_slope(ell, np.log2(cost)))


def _try_rates(records) -> Rates | None:
    try:
        return fit_rates(records)
    except InsufficientLevelsError:
        return None


# ---------------------------------------------------------------------------
# Sampling helpers
# ---------------------------------------------------------------------------


def _extend(spec: ModelSpec, accs: dict, level: int, count: int, seed: int,
            params: SmoothingParams, m0: int):
    """Append samples ``n .. n+count-1`` of ``level`` to each accumulator in ``accs``."""
    methods = list(accs)
    start = next(iter(accs.values())).n
    if any(acc.n != start for acc in accs.values()):
        raise RuntimeError("accumulators sharing a level must hold the same samples")
    done = 0
    while done < count:
        k = min(_BATCH, count - done)
        batches = sample_levels(spec, methods, level, start + done, k, seed, params, m0=m0)
        for mk, b in batches.items():
            accs[mk].add_level_batch(b)
        done += k


def _records(accs: Sequence[LevelAccumulator], m0: int) -> list[LevelRecord]:
    out, cum = [], 0
    for acc in accs:
        cum += acc.cost_units
        out.append(LevelRecord(acc.level, inner_size(acc.level, m0), acc.n, acc.mean,
                               acc.variance, acc.reported_kurtosis(), acc.cost_units, cum))
    return out


def level_study(spec: ModelSpec, methods, levels: Iterable[int], n: int, seed: int,
                params: SmoothingParams = SmoothingParams(), m0: int = 32) -> dict:
    """Fixed ``n`` samples on each level for each method.

    Methods share scenarios and inner samples (per inner source), so their
    per-level statistics are directly comparable.  Returns
    ``{MethodKind: [LevelRecord, ...]}``.
    """
    methods = [MethodKind.parse(mk) for mk in methods]
    if MethodKind.NESTED_MC in methods:
        raise ValueError("NestedMC has no levels")
    out = {mk: [] for mk in methods}
    for level in levels:
        accs = {mk: LevelAccumulator(level) for mk in methods}
        _extend(spec, accs, level, n, seed, params, m0)
        for mk in methods:
            out[mk].append(accs[mk])
    return {mk: _records(a, m0) for mk, a in out.items()}


# ---------------------------------------------------------------------------
# Algorithm 1
# ---------------------------------------------------------------------------


def _allocation_variances(accs: Sequence[LevelAccumulator], threshold: int) -> np.ndarray:
    v = np.array([acc.variance for acc in accs])
    records = _records(accs, 1)
    rates = _try_rates(records)
    beta = -rates.beta_hat if rates is not None and math.isfinite(rates.beta_hat) else 1.0
    beta = max(beta, 0.5)
    for ell in range(1, len(v)):
        if accs[ell].n < threshold:
            v[ell] = max(v[ell], v[ell - 1] * 2.0 ** -beta)
    return v


def run_mlmc(spec: ModelSpec, config: RunConfig) -> RunReport:
    """Adaptive multilevel estimate of ``P(loss > c)`` to RMS accuracy ``config.tol``."""
    if config.method is MethodKind.NESTED_MC:
        return _run_nested(spec, config)
    t0 = time.perf_counter()
    cfg = config
    accs: list[LevelAccumulator] = []
    pending = []
    for ell in range(cfg.L0 + 1):
        accs.append(LevelAccumulator(ell))
        pending.append(cfg.N_star)
    converged, message = False, ""
    while True:
        for ell, dn in enumerate(pending):
            if dn > 0:
                _extend(spec, {cfg.method: accs[ell]}, ell, int(dn), cfg.seed, cfg.smoothing, cfg.m0)
        v = _allocation_variances(accs, cfg.sparse_threshold)
        c = np.array([acc.cost_per_sample for acc in accs])
        target = optimal_allocation(v, c, cfg.tol, cfg.omega_split)
        pending = [max(0, int(t) - acc.n) for t, acc in zip(target, accs)]
        if any(pending):
            continue
        means = [acc.mean for acc in accs]
        if bias_converged(means, cfg.alpha, cfg.tol, cfg.omega_split,
                          [acc.std_error for acc in accs]):
            converged = True
            break
        L = len(accs) - 1
        if L >= cfg.max_level_cap:
            message = f"bias not converged at cap (L = {L})"
            log.warning(message)
            break
        accs.append(LevelAccumulator(L + 1))
        pending = [0] * (L + 1) + [cfg.N_star]
    records = _records(accs, cfg.m0)
    tel = telescope([r.mean for r in records])
    return RunReport(
        method=cfg.method,
        levels=records,
        estimate=tel.estimate,
        raw_estimate=tel.raw,
        total_cost=records[-1].cumulative_cost,
        wall_time=time.perf_counter() - t0,
        converged=converged,
        config=cfg.to_dict(),
        model=spec.to_dict(),
        rates=_try_rates(records),
        status="ok" if converged else "bias-not-converged",
        message=message,
    )


def _run_nested(spec: ModelSpec, cfg: RunConfig) -> RunReport:
    """Plain nested MC with ``m`` fixed by a bias pilot and ``n`` by the variance."""
    t0 = time.perf_counter()
    pilot: list[LevelAccumulator] = []
    converged = False
    for ell in range(cfg.max_level_cap + 1):
        acc = LevelAccumulator(ell)
        _extend(spec, {MethodKind.STD_MLMC: acc}, ell, cfg.N_star, cfg.seed, cfg.smoothing, cfg.m0)
        pilot.append(acc)
        if ell >= cfg.L0 and bias_converged([a.mean for a in pilot], cfg.alpha, cfg.tol,
                                            cfg.omega_split, [a.std_error for a in pilot]):
            converged = True
            break
    L = len(pilot) - 1
    m = inner_size(L, cfg.m0)
    pilot_cost = sum(a.cost_units for a in pilot)

    acc = LevelAccumulator(L)
    n = cfg.N_star
    while True:
        g = nested_indicators(spec, m, acc.n, n - acc.n, cfg.seed)
        acc.add_batch(g, np.full(g.shape, m))
        need = max(2, math.ceil(acc.variance / ((1.0 - cfg.omega_split) * cfg.tol ** 2)))
        if need <= acc.n:
            break
        n = need
    total = pilot_cost + acc.cost_units
    record = LevelRecord(L, m, acc.n, acc.mean, acc.variance, acc.reported_kurtosis(),
                         acc.cost_units, total)
    est = acc.mean
    message = "" if converged else f"bias not converged at cap (L = {L})"
    return RunReport(
        method=MethodKind.NESTED_MC,
        levels=[record],
        estimate=est,
        raw_estimate=est,
        total_cost=total,
        wall_time=time.perf_counter() - t0,
        converged=converged,
        config=cfg.to_dict(),
        model=spec.to_dict(),
        rates=None,
        status="ok" if converged else "bias-not-converged",
        message=message,
    )


# ---------------------------------------------------------------------------
# Cost against tolerance
# ---------------------------------------------------------------------------


class CostRow(NamedTuple):
    method: MethodKind
    tol: float
    total_cost: float
    estimate: float
    L: int
    converged: bool


@dataclass
class CostTable:
    rows: list[CostRow]
    exponents: dict
    reports: list[RunReport] = field(default_factory=list, repr=False)

    def costs(self, method) -> tuple[np.ndarray, np.ndarray]:
        mk = MethodKind.parse(method)
        rows = [r for r in self.rows if r.method is mk]
        return np.array([r.tol for r in rows]), np.array([r.total_cost for r in rows], dtype=float)


def fit_cost_exponent(tols, costs) -> float:
    """Slope of ``log cost`` against ``log tol``."""
    return fit_slope(np.log(np.asarray(tols, dtype=float)), np.log(np.asarray(costs, dtype=float)))


def cost_vs_tol_study(spec: ModelSpec, methods, tol_list, seed: int,
                      base: RunConfig | None = None, repeats: int = 1) -> CostTable:
    """Run every method at every tolerance and fit the cost exponents.

    With ``repeats > 1`` each cell is run with seeds ``seed .. seed+repeats-1``
    and the row holds the mean total cost and mean estimate; ``L`` is the
    deepest level reached and ``converged`` requires every repeat to converge.
    """
    tols = sorted({float(t) for t in tol_list}, reverse=True)
    if len(tols) < 3:
        raise ValueError("need at least 3 distinct tolerances")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if tols[0] / tols[-1] < 10.0 * (1 - 1e-12):
        log.warning("tolerances span less than a decade; the exponent fit is loose")
    base = base or RunConfig()
    rows, reports = [], []
    for method in methods:
        mk = MethodKind.parse(method)
        for tol in tols:
            reps = [run_mlmc(spec, base.replace(method=mk, tol=tol, seed=seed + k))
                    for k in range(repeats)]
            reports.extend(reps)
            cost = reps[0].total_cost if repeats == 1 else float(np.mean([r.total_cost for r in reps]))
            rows.append(CostRow(mk, tol, cost, float(np.mean([r.estimate for r in reps])),
                                max(r.L for r in reps), all(r.converged for r in reps)))
    table = CostTable(rows, {}, reports)
    for method in methods:
        mk = MethodKind.parse(method)
        table.exponents[mk] = fit_cost_exponent(*table.costs(mk))
    return table
