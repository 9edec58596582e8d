"""Black-Scholes portfolio of European calls.

Outer scenarios are asset prices at the risk horizon ``tau`` under the
real-world drift ``mu``; inner samples are discounted portfolio payoffs at
maturity ``T`` under the risk-neutral rate ``mu0``.  The loss of a scenario is
``V0 - E[discounted payoff | omega]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .numkit import (
    RngStream,
    cholesky,
    gray_code_points,
    ndtri_scalar,
    std_normal_cdf,
)

__all__ = [
    "ModelSpec",
    "Scenario",
    "InnerBatch",
    "paper_covariance",
    "paper_model",
    "bs_call_price",
    "bs_call_delta",
    "initial_value",
    "outer_map",
    "sample_outer",
    "inner_payoff",
    "sample_inner_batch",
    "inner_loss_estimate",
    "conditional_loss",
    "inner_size",
]


def inner_size(level: int, m0: int = 32) -> int:
    """Inner sample count ``m0 * 2**level`` of a level."""
    if level < 0:
        raise ValueError("level must be >= 0")
    return m0 << level


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Parameters of the d-asset call portfolio.

    ``sigma`` is the lower-triangular volatility factor matrix (per sqrt
    year); asset ``i`` has total volatility ``norm(sigma[i])``.  Sigma may be
    all zero for degenerate test cases.  The preintegration path further
    needs :attr:`separable`.
    """

    S0: np.ndarray
    mu: float
    mu0: float
    sigma: np.ndarray
    K: np.ndarray
    T: float
    tau: float
    c: float
    vols: np.ndarray = field(init=False, repr=False)
    V0: float = field(init=False)

    def __post_init__(self):
        S0 = np.array(self.S0, dtype=np.float64, ndmin=1)
        K = np.array(self.K, dtype=np.float64, ndmin=1)
        sigma = np.array(self.sigma, dtype=np.float64, ndmin=2)
        d = S0.shape[0]
        if K.shape != (d,) or sigma.shape != (d, d):
            raise ValueError("S0, K and sigma must describe the same number of assets")
        if not 0.0 < self.tau < self.T:
            raise ValueError(f"need 0 < tau < T, got tau={self.tau}, T={self.T}")
        if np.any(S0 <= 0.0):
            raise ValueError("all S0 must be > 0")
        if np.any(K <= 0.0):
            raise ValueError("all K must be > 0")
        if np.any(np.triu(sigma, 1) != 0.0):
            raise ValueError("sigma must be lower triangular")
        for name, arr in (("S0", S0), ("K", K), ("sigma", sigma)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        vols = np.sqrt(np.sum(sigma * sigma, axis=1))
        vols.setflags(write=False)
        object.__setattr__(self, "vols", vols)
        object.__setattr__(self, "V0", initial_value(self))

    @property
    def d(self) -> int:
        return self.S0.shape[0]

    @property
    def separable(self) -> bool:
        """Asset 1 is driven by factor 1 alone, with positive volatility."""
        return bool(self.sigma[0, 0] > 0.0 and np.all(self.sigma[1:, 0] == 0.0))

    @property
    def horizon_gap(self) -> float:
        return self.T - self.tau

    @property
    def discount(self) -> float:
        return math.exp(-self.mu0 * (self.T - self.tau))

    def replace(self, **changes) -> "ModelSpec":
        kw = dict(S0=self.S0, mu=self.mu, mu0=self.mu0, sigma=self.sigma,
                  K=self.K, T=self.T, tau=self.tau, c=self.c)
        kw.update(changes)
        return ModelSpec(**kw)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "S0": self.S0.tolist(),
            "mu": self.mu,
            "mu0": self.mu0,
            "sigma": self.sigma.tolist(),
            "K": self.K.tolist(),
            "T": self.T,
            "tau": self.tau,
            "c": self.c,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(S0=data["S0"], mu=data["mu"], mu0=data["mu0"],
                   sigma=data["sigma"], K=data["K"], T=data["T"],
                   tau=data["tau"], c=data["c"])


def paper_covariance(d: int, var_first: float = 0.3, var_rest: float = 0.3,
                     decay: float = 0.98) -> np.ndarray:
    """Covariance with ``C[i, j] = var_rest * decay**|i-j|`` among assets 2..d.

    Asset 1 has variance ``var_first`` and is uncorrelated with the others,
    which is what makes the portfolio separable in the first asset.
    """
    C = np.zeros((d, d))
    C[0, 0] = var_first
    idx = np.arange(1, d)
    C[1:, 1:] = var_rest * decay ** np.abs(idx[:, None] - idx[None, :])
    return C


def paper_model(d: int = 4, *, c: float | None = None, S0: float = 100.0,
                K: float = 95.0, mu: float = 0.08, mu0: float = 0.05,
                T: float = 0.1, tau: float = 0.02, var_first: float = 0.3,
                var_rest: float = 0.3, decay: float = 0.98) -> ModelSpec:
    """The benchmark portfolio: ``d`` identical calls on correlated assets.

    The loss threshold ``c`` defaults to half the initial portfolio value,
    which puts the loss probability near 0.1 for every ``d``.
    """
    if var_first < 0.0 or var_rest < 0.0:
        raise ValueError("variances must be >= 0")
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    # zero variances give the degenerate test models; the blocks factor separately
    sigma = np.zeros((d, d))
    sigma[0, 0] = math.sqrt(var_first)
    if var_rest > 0.0 and d > 1:
        sigma[1:, 1:] = cholesky(paper_covariance(d, var_first, var_rest, decay)[1:, 1:])
    spec = ModelSpec(S0=np.full(d, S0), mu=mu, mu0=mu0, sigma=sigma,
                     K=np.full(d, K), T=T, tau=tau, c=0.0)
    if c is None:
        c = 0.5 * spec.V0
    return spec.replace(c=float(c))


# ---------------------------------------------------------------------------
# Closed-form pricing
# ---------------------------------------------------------------------------


def _check_bs_domain(s, k, vol, t):
    if np.any(np.asarray(s) <= 0.0) or np.any(np.asarray(k) <= 0.0):
        raise ValueError("spot and strike must be > 0")
    if np.any(np.asarray(t) <= 0.0):
        raise ValueError("time to maturity must be > 0")
    if np.any(np.asarray(vol) < 0.0):
        raise ValueError("volatility must be >= 0")


def _d1(s, k, r, vol, t):
    with np.errstate(divide="ignore", invalid="ignore"):
        return (np.log(s / k) + (r + 0.5 * vol * vol) * t) / (vol * np.sqrt(t))


def bs_call_price(s, k, r, vol, t):
    """Black-Scholes price of a European call.

    ``vol == 0`` gives the intrinsic forward value ``max(s - k e^{-rt}, 0)``.
    """
    _check_bs_domain(s, k, vol, t)
    s, k, r, vol, t = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64)
                                            for a in (s, k, r, vol, t)))
    disc_k = k * np.exp(-r * t)
    d1 = _d1(s, k, r, vol, t)
    price = s * std_normal_cdf(d1) - disc_k * std_normal_cdf(d1 - vol * np.sqrt(t))
    price = np.where(vol > 0.0, price, np.maximum(s - disc_k, 0.0))
    price = np.maximum(price, 0.0)
    return float(price) if price.ndim == 0 else price


def bs_call_delta(s, k, r, vol, t):
    """Call delta ``Phi(d1)``; the step function at the forward when vol is 0."""
    _check_bs_domain(s, k, vol, t)
    s, k, r, vol, t = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64)
                                            for a in (s, k, r, vol, t)))
    delta = std_normal_cdf(_d1(s, k, r, vol, t))
    delta = np.where(vol > 0.0, delta, (s > k * np.exp(-r * t)).astype(np.float64))
    return float(delta) if delta.ndim == 0 else delta


def initial_value(spec: ModelSpec) -> float:
    """Portfolio value at time 0."""
    return float(np.sum(bs_call_price(spec.S0, spec.K, spec.mu0, spec.vols, spec.T)))


def conditional_loss(spec: ModelSpec, omega) -> np.ndarray | float:
    """Exact loss ``V0 - E[discounted payoff | omega]`` by closed-form pricing."""
    omega = np.asarray(omega, dtype=np.float64)
    values = bs_call_price(omega, spec.K, spec.mu0, spec.vols, spec.horizon_gap)
    out = spec.V0 - np.sum(values, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Outer scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Scenario:
    """One outer sample: driving normals ``z`` and prices ``omega`` at tau."""

    z: np.ndarray
    omega: np.ndarray

    @property
    def omega1(self) -> float:
        return float(self.omega[0])

    @property
    def omega_rest(self) -> np.ndarray:
        return self.omega[1:]


def outer_map(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    """Prices at tau for rows of standard normals ``z`` (shape (..., d))."""
    z = np.asarray(z, dtype=np.float64)
    # row-wise products summed over a short axis: bit-identical for any batch size
    shocks = np.sum(z[..., None, :] * spec.sigma, axis=-1)
    drift = (spec.mu - 0.5 * spec.vols ** 2) * spec.tau
    return spec.S0 * np.exp(drift + math.sqrt(spec.tau) * shocks)


def sample_outer(spec: ModelSpec, stream: RngStream, index: int = 0) -> Scenario:
    """Outer scenario number ``index`` of ``stream`` (draws ``index*d .. +d``)."""
    z = stream.normals(index * spec.d, spec.d)
    return Scenario(z=z, omega=outer_map(spec, z))


# ---------------------------------------------------------------------------
# Inner payoffs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InnerBatch:
    """Discounted portfolio payoffs drawn for one scenario."""

    payoffs: np.ndarray
    source: str = "pseudo-random"

    @property
    def m(self) -> int:
        return self.payoffs.shape[0]


def _terminal_prices(spec: ModelSpec, omega: np.ndarray, w: np.ndarray) -> np.ndarray:
    dt = spec.horizon_gap
    shocks = np.sum(w[..., None, :] * spec.sigma, axis=-1)
    drift = (spec.mu0 - 0.5 * spec.vols ** 2) * dt
    return omega * np.exp(drift + math.sqrt(dt) * shocks)


def inner_payoff(spec: ModelSpec, scen: Scenario, w) -> float | np.ndarray:
    """Discounted portfolio payoff for risk-neutral normals ``w`` (shape (..., d))."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != spec.d:
        raise ValueError(f"w must have trailing length {spec.d}")
    ST = _terminal_prices(spec, scen.omega, w)
    out = spec.discount * np.sum(np.maximum(ST - spec.K, 0.0), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def sample_inner_batch(spec: ModelSpec, scen: Scenario, stream: RngStream, m: int,
                       start: int = 0) -> InnerBatch:
    """``m`` payoffs using ``m * d`` normals of ``stream`` from draw ``start``."""
    w = stream.normals(start, m * spec.d).reshape(m, spec.d)
    return InnerBatch(payoffs=np.asarray(inner_payoff(spec, scen, w)).reshape(m))


def inner_loss_estimate(spec: ModelSpec, scen: Scenario, batch: InnerBatch) -> float:
    """Unbiased estimate ``V0 - mean(payoffs)`` of the scenario loss."""
    if batch.m == 0:
        raise ValueError("empty inner batch")
    return spec.V0 - float(np.mean(batch.payoffs))


# ---------------------------------------------------------------------------
# Vectorised inner half-sums (hot path)
# ---------------------------------------------------------------------------
#
# For every scenario the kernels return the sums of discounted payoffs of the
# simulated assets over the first and the second half of the inner batch.
# Those two numbers give the fine estimator, the coarse estimator (first
# half) and the antithetic partner (second half) of any coupled level.


@numba.njit(cache=True, error_model="numpy")
def _half_sums_mc(omega, load, drift, strike, raw, m, out):
    n, a = omega.shape
    f = load.shape[1]
    half = m // 2
    w = np.empty(f)
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        base = 0
        for j in range(m):
            for q in range(f):
                r = raw[i, base + q]
                w[q] = ndtri_scalar(((r >> np.uint64(11)) + 0.5) * 1.1102230246251565e-16)
            base += f
            pay = 0.0
            for k in range(a):
                x = drift[k]
                for q in range(k + 1):
                    x += load[k, q] * w[q]
                st = omega[i, k] * math.exp(x) - strike[k]
                if st > 0.0:
                    pay += st
            if j < half:
                s1 += pay
            else:
                s2 += pay
        out[i, 0] = s1
        out[i, 1] = s2


@numba.njit(cache=True, error_model="numpy")
def _half_sums_qmc(omega, load, drift, strike, dirs, shifts, m, out):
    n, a = omega.shape
    f = load.shape[1]
    half = m // 2
    pts = np.empty((m, f), dtype=np.uint64)
    w = np.empty(f)
    for i in range(n):
        gray_code_points(dirs[i], shifts[i], m, pts)
        s1 = 0.0
        s2 = 0.0
        for j in range(m):
            for q in range(f):
                w[q] = ndtri_scalar((pts[j, q] + 0.5) * 2.3283064365386963e-10)
            pay = 0.0
            for k in range(a):
                x = drift[k]
                for q in range(k + 1):
                    x += load[k, q] * w[q]
                st = omega[i, k] * math.exp(x) - strike[k]
                if st > 0.0:
                    pay += st
            if j < half:
                s1 += pay
            else:
                s2 += pay
        out[i, 0] = s1
        out[i, 1] = s2


@dataclass(frozen=True)
class InnerLayout:
    """Which assets are simulated in the inner layer and by which factors.

    With ``exact_first`` the first asset's conditional value is priced in
    closed form, so only assets 2..d (driven by factors 2..d) are simulated.
    """

    assets: slice
    factors: slice

    @classmethod
    def for_spec(cls, spec: ModelSpec, exact_first: bool) -> "InnerLayout":
        if exact_first:
            if not spec.separable:
                raise ValueError("exact first-asset pricing needs a separable model")
            return cls(slice(1, spec.d), slice(1, spec.d))
        return cls(slice(0, spec.d), slice(0, spec.d))

    def n_factors(self, spec: ModelSpec) -> int:
        return len(range(spec.d)[self.factors])


def inner_half_sums(spec: ModelSpec, omega: np.ndarray, m: int, layout: InnerLayout,
                    *, raw: np.ndarray | None = None, dirs: np.ndarray | None = None,
                    shifts: np.ndarray | None = None) -> np.ndarray:
    """Discounted payoff sums over the two halves of each scenario's batch.

    Exactly one randomness source is given: ``raw`` words of shape
    ``(n, m * f)`` for pseudo-random inner samples, or scrambled net direction
    numbers ``dirs`` (n, f, log2 m) with ``shifts`` (n, f).
    """
    n = omega.shape[0]
    dt = spec.horizon_gap
    out = np.zeros((n, 2))
    om = np.ascontiguousarray(omega[:, layout.assets])
    if om.shape[1] == 0 or n == 0:
        return out
    # lower triangular: the kernels only visit q <= k
    load = np.ascontiguousarray(spec.sigma[layout.assets, layout.factors] * math.sqrt(dt))
    vols = spec.vols[layout.assets]
    drift = np.ascontiguousarray((spec.mu0 - 0.5 * vols ** 2) * dt)
    strike = np.ascontiguousarray(spec.K[layout.assets])
    if raw is not None:
        _half_sums_mc(om, load, drift, strike, raw, m, out)
    else:
        _half_sums_qmc(om, load, drift, strike, dirs, shifts, m, out)
    return out * spec.discount
