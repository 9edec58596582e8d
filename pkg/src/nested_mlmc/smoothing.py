"""Preintegration of the loss indicator over the first asset.

For a fixed remainder ``omega_{-1}`` the indicator ``1{loss > c}`` is a step
function of ``omega_1``.  Integrating it against the density of ``omega_1``
gives a smooth conditional probability.  Two routes are provided:

* analytic: locate the step by inverting the first asset's call price and
  evaluate the lognormal CDF there;
* numerical: locate the step by Newton's method and integrate with a
  Gauss-Laguerre rule on each side of it.

Both work in terms of ``loss_rest = V0 - (rest-of-portfolio value) - c``,
the budget left for the first asset's option value: the loss event is
``call_1(omega_1) < loss_rest``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, NamedTuple

import numba
import numpy as np
from numpy.polynomial.laguerre import laggauss

from .model import ModelSpec, bs_call_price
from .numkit import std_normal_cdf

__all__ = [
    "SmoothingParams",
    "RootResult",
    "NoRootError",
    "QuadratureRule",
    "Smoothed",
    "newton_root",
    "laguerre_rule",
    "analytic_smoothed_indicator",
    "analytic_smoothed_batch",
    "numerical_smoothing",
    "numerical_smoothed_indicator",
    "numerical_smoothed_batch",
    "first_asset_root_width",
    "first_asset_excess",
    "std_normal_pdf",
]

_TINY_SLOPE = 1e-14


@dataclass(frozen=True)
class SmoothingParams:
    """Root-finding and quadrature settings, shared by every level."""

    newton_tol: float = 1e-10
    max_iterations: int = 100
    m_lag: int = 32
    mode: str = "analytic"
    lag_scale: float = 0.2

    def __post_init__(self):
        if not self.newton_tol > 0.0:
            raise ValueError("newton_tol must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.m_lag < 1:
            raise ValueError("m_lag must be >= 1")
        if self.mode not in ("analytic", "numerical"):
            raise ValueError(f"mode must be 'analytic' or 'numerical', got {self.mode!r}")
        if not self.lag_scale > 0.0:
            raise ValueError("lag_scale must be > 0")


@dataclass(frozen=True)
class RootResult:
    root: float
    iterations: int
    converged: bool
    residual: float


class NoRootError(ValueError):
    """No sign change of the target function was found in its domain."""

    def __init__(self, message: str, last_x: float, last_f: float):
        super().__init__(message)
        self.last_x = last_x
        self.last_f = last_f


# ---------------------------------------------------------------------------
# Safeguarded Newton
# ---------------------------------------------------------------------------


def newton_root(f: Callable[[float], float], df: Callable[[float], float], x0: float,
                params: SmoothingParams = SmoothingParams(), *,
                lower: float = -math.inf, upper: float = math.inf,
                width: float = 1.0) -> RootResult:
    """Root of a strictly monotone ``f`` by Newton's method with safeguards.

    Every evaluation narrows a bracket ``(lo, hi)`` known to hold the root.
    A Newton step that leaves the bracket, or meets a slope below 1e-14,
    is replaced by bisection once both bracket ends are known and by a
    geometric expansion (initial step ``width``, doubling) before that.
    Expansion towards a finite domain bound halves the distance to it.

    Raises :class:`NoRootError` when the iteration budget is spent without
    ever seeing a sign change.
    """
    tol = params.newton_tol
    x = float(x0)
    fx = f(x)
    dx = df(x)
    if dx > 0.0:
        orient = 1.0
    elif dx < 0.0:
        orient = -1.0
    else:
        orient = 1.0 if f(x + width) > fx else -1.0
    lo, hi = lower, upper
    lo_seen = hi_seen = False
    it = 0
    while abs(fx) > tol:
        if fx * orient > 0.0:
            hi, hi_seen = x, True
        else:
            lo, lo_seen = x, True
        if it >= params.max_iterations:
            break
        if lo_seen and hi_seen and hi - lo <= 4.0 * math.ulp(max(abs(lo), abs(hi))):
            break
        step_ok = False
        if abs(dx) >= _TINY_SLOPE and dx * orient > 0.0:
            xn = x - fx / dx
            step_ok = lo < xn < hi
        if not step_ok:
            if lo_seen and hi_seen:
                xn = 0.5 * (lo + hi)
            elif hi_seen:
                xn = x - width
                if xn <= lo:
                    xn = 0.5 * (x + lo)
                width *= 2.0
            else:
                xn = x + width
                if xn >= hi:
                    xn = 0.5 * (x + hi)
                width *= 2.0
        x = xn
        fx = f(x)
        dx = df(x)
        it += 1
    converged = abs(fx) <= tol
    if not converged and not (lo_seen and hi_seen):
        raise NoRootError("no root in domain", x, fx)
    return RootResult(root=x, iterations=it, converged=converged, residual=abs(fx))


# The same iteration specialised to inverting a call price in the spot; it
# runs element-wise over a batch of targets inside the level samplers.

_SQRT1_2 = 1.0 / math.sqrt(2.0)


@numba.njit(cache=True)
def _call_and_delta(s, k, r, vol, t):
    sq = vol * math.sqrt(t)
    d1 = (math.log(s / k) + (r + 0.5 * vol * vol) * t) / sq
    nd1 = 0.5 * math.erfc(-d1 * _SQRT1_2)
    nd2 = 0.5 * math.erfc(-(d1 - sq) * _SQRT1_2)
    return s * nd1 - k * math.exp(-r * t) * nd2, nd1


@numba.njit(cache=True)
def _invert_call(targets, x0, k, r, vol, t, width0, tol, maxit, roots, iters):
    for i in range(targets.shape[0]):
        p = targets[i]
        if not p > 0.0:
            roots[i] = 0.0
            iters[i] = 0
            continue
        x = x0[i]
        price, dx = _call_and_delta(x, k, r, vol, t)
        fx = price - p
        lo = 0.0
        hi = math.inf
        lo_seen = False
        hi_seen = False
        width = width0
        it = 0
        while abs(fx) > tol:
            if fx > 0.0:
                hi = x
                hi_seen = True
            else:
                lo = x
                lo_seen = True
            if it >= maxit:
                break
            if lo_seen and hi_seen and hi - lo <= 1e-15 * hi:
                break
            step_ok = False
            xn = x
            if dx >= 1e-14:
                xn = x - fx / dx
                step_ok = lo < xn < hi
            if not step_ok:
                if lo_seen and hi_seen:
                    xn = 0.5 * (lo + hi)
                elif hi_seen:
                    xn = x - width
                    if xn <= lo:
                        xn = 0.5 * (x + lo)
                    width *= 2.0
                else:
                    xn = x + width
                    width *= 2.0
            x = xn
            price, dx = _call_and_delta(x, k, r, vol, t)
            fx = price - p
            it += 1
        roots[i] = x
        iters[i] = it


def first_asset_root_width(spec: ModelSpec) -> float:
    """Initial bracket step ``sigma_11 sqrt(tau) S0_1`` for the spot inversion."""
    return float(spec.sigma[0, 0] * math.sqrt(spec.tau) * spec.S0[0])


def _first_asset_z(spec: ModelSpec, s):
    """Standardised normal coordinate of a first-asset price at tau."""
    s11 = spec.sigma[0, 0]
    return (np.log(s / spec.S0[0]) - (spec.mu - 0.5 * s11 * s11) * spec.tau) / (
        s11 * math.sqrt(spec.tau))


def _first_asset_price(spec: ModelSpec, z):
    s11 = spec.sigma[0, 0]
    return spec.S0[0] * np.exp((spec.mu - 0.5 * s11 * s11) * spec.tau
                               + s11 * math.sqrt(spec.tau) * z)


def _require_separable(spec: ModelSpec):
    if not spec.separable:
        raise ValueError("preintegration over the first asset needs a separable model "
                         "(sigma[0, 0] > 0 and sigma[i, 0] == 0 for i >= 1)")


def _solve_first_asset(spec: ModelSpec, loss_rest: np.ndarray, params: SmoothingParams,
                       x0: np.ndarray | None):
    loss_rest = np.ascontiguousarray(loss_rest, dtype=np.float64)
    if x0 is None:
        x0 = np.full(loss_rest.shape, float(spec.S0[0]))
    x0 = np.ascontiguousarray(np.broadcast_to(x0, loss_rest.shape), dtype=np.float64)
    roots = np.empty_like(loss_rest)
    iters = np.empty(loss_rest.shape, dtype=np.int64)
    _invert_call(loss_rest, x0, float(spec.K[0]), spec.mu0, float(spec.vols[0]),
                 spec.horizon_gap, first_asset_root_width(spec), params.newton_tol,
                 params.max_iterations, roots, iters)
    return roots, iters


# ---------------------------------------------------------------------------
# Analytic route
# ---------------------------------------------------------------------------


def analytic_smoothed_batch(spec: ModelSpec, loss_rest, params: SmoothingParams = SmoothingParams(),
                            x0=None):
    """Conditional loss probabilities for an array of ``loss_rest`` values.

    Returns ``(h, roots, iterations)``; ``h`` is exactly 0 and no iteration
    is spent where ``loss_rest <= 0``.  ``x0`` are Newton starting spots
    (default ``S0_1``).
    """
    _require_separable(spec)
    loss_rest = np.asarray(loss_rest, dtype=np.float64)
    roots, iters = _solve_first_asset(spec, loss_rest.ravel(), params,
                                      None if x0 is None else np.ravel(x0))
    h = np.zeros_like(roots)
    pos = loss_rest.ravel() > 0.0
    h[pos] = std_normal_cdf(_first_asset_z(spec, roots[pos]))
    shape = loss_rest.shape
    return h.reshape(shape), roots.reshape(shape), iters.reshape(shape)


def analytic_smoothed_indicator(spec: ModelSpec, loss_rest: float,
                                params: SmoothingParams = SmoothingParams(),
                                x0: float | None = None) -> float:
    """``P(omega_1 <= psi | omega_{-1})`` where ``call_1(psi) = loss_rest``."""
    h, _, _ = analytic_smoothed_batch(spec, np.array([loss_rest]), params,
                                      None if x0 is None else np.array([x0]))
    return float(h[0])


# ---------------------------------------------------------------------------
# Two-sided Laguerre quadrature
# ---------------------------------------------------------------------------


def std_normal_pdf(x):
    return np.exp(-0.5 * np.asarray(x) ** 2) / math.sqrt(2.0 * math.pi)


@lru_cache(maxsize=None)
def _laguerre(m: int):
    t, w = laggauss(m)
    t.setflags(write=False)
    w.setflags(write=False)
    return t, w


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Nodes and density-absorbing weights split at a located discontinuity.

    ``nodes[0]`` is the anchor (with weight 0); the following ``m_lag`` nodes
    lie below it and the last ``m_lag`` above it.
    """

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def root(self) -> float:
        return float(self.nodes[0])

    @property
    def m_lag(self) -> int:
        return (self.nodes.shape[0] - 1) // 2

    def apply(self, g) -> float:
        return float(np.dot(self.weights, g(self.nodes)))


def _two_sided(density, roots, m_lag, scale):
    """Nodes/weights of shape (n, 2 * m_lag) for an array of anchors."""
    t, w = _laguerre(m_lag)
    st = scale * t
    left = roots[:, None] - st
    right = roots[:, None] + st
    nodes = np.concatenate([left, right], axis=1)
    with np.errstate(over="ignore", invalid="ignore"):
        base = scale * w * np.exp(t)
        weights = np.concatenate([base * density(left), base * density(right)], axis=1)
    weights = np.nan_to_num(weights, nan=0.0, posinf=0.0)
    return nodes, weights


def laguerre_rule(density: Callable = std_normal_pdf, root: float = 0.0, m_lag: int = 32,
                  scale: float = 0.2) -> QuadratureRule:
    """Two-sided Gauss-Laguerre rule for ``integral g(x) density(x) dx``.

    On each side of ``root`` the Laguerre nodes ``t_k`` are placed at
    ``root -/+ scale * t_k`` with weights ``scale * w_k * exp(t_k) *
    density(node)``, so a piecewise-constant ``g`` that jumps at ``root`` is
    integrated side by side.  ``scale`` should be about 0.2 times the
    spread of the density.
    """
    if m_lag < 1:
        raise ValueError("m_lag must be >= 1")
    if not scale > 0.0:
        raise ValueError("scale must be > 0")
    nodes, weights = _two_sided(density, np.array([float(root)]), m_lag, scale)
    return QuadratureRule(nodes=np.concatenate([[float(root)], nodes[0]]),
                          weights=np.concatenate([[0.0], weights[0]]))


# ---------------------------------------------------------------------------
# Numerical route
# ---------------------------------------------------------------------------


class Smoothed(NamedTuple):
    value: float
    root: float
    iterations: int
    overshoot: float
    degenerate: bool


def numerical_smoothing(excess: Callable[[float], float], density: Callable,
                        d_excess: Callable[[float], float], x0: float,
                        params: SmoothingParams = SmoothingParams(), *,
                        median: float = 0.0) -> Smoothed:
    """Integrate ``1{excess(x) > 0}`` against ``density`` around the root.

    ``excess`` is the smooth function whose sign defines the indicator and
    ``d_excess`` its (approximate) derivative, used by Newton.  When no root
    exists the indicator is constant and is evaluated at ``median``.  The
    result is clamped to [0, 1]; the clamped amount is reported as
    ``overshoot``.
    """
    try:
        res = newton_root(excess, d_excess, x0, params)
    except NoRootError:
        return Smoothed(float(excess(median) > 0.0), math.nan, params.max_iterations,
                        0.0, True)
    rule = laguerre_rule(density, res.root, params.m_lag, params.lag_scale)
    raw = rule.apply(lambda x: (np.vectorize(excess)(x) > 0.0).astype(np.float64))
    value = min(max(raw, 0.0), 1.0)
    return Smoothed(value, res.root, res.iterations, abs(raw - value), False)


def numerical_smoothed_indicator(excess, density, d_excess, x0,
                                 params: SmoothingParams = SmoothingParams()) -> float:
    """Value of :func:`numerical_smoothing`."""
    return numerical_smoothing(excess, density, d_excess, x0, params).value


def first_asset_excess(spec: ModelSpec, loss_rest: float):
    """``excess(z)`` and its derivative for the portfolio, in the first asset's
    standardised normal coordinate ``z``."""
    _require_separable(spec)
    s11 = float(spec.sigma[0, 0])
    k, r, vol, t = float(spec.K[0]), spec.mu0, float(spec.vols[0]), spec.horizon_gap
    scale = s11 * math.sqrt(spec.tau)

    def excess(z):
        s = float(_first_asset_price(spec, z))
        return loss_rest - _call_and_delta(s, k, r, vol, t)[0]

    def d_excess(z):
        s = float(_first_asset_price(spec, z))
        return -_call_and_delta(s, k, r, vol, t)[1] * s * scale

    return excess, d_excess


def numerical_smoothed_batch(spec: ModelSpec, loss_rest, params: SmoothingParams = SmoothingParams(),
                             x0=None):
    """Quadrature counterpart of :func:`analytic_smoothed_batch`.

    The discontinuity is located by the same Newton iteration; the
    conditional probability is then integrated over the first asset's
    standard normal coordinate with the two-sided Laguerre rule instead of
    being read off the normal CDF.  Returns ``(h, roots, iterations)``.
    """
    _require_separable(spec)
    loss_rest = np.asarray(loss_rest, dtype=np.float64)
    flat = loss_rest.ravel()
    roots, iters = _solve_first_asset(spec, flat, params,
                                      None if x0 is None else np.ravel(x0))
    pos = flat > 0.0
    h = np.zeros_like(flat)
    if np.any(pos):
        z_root = _first_asset_z(spec, roots[pos])
        nodes, weights = _two_sided(std_normal_pdf, z_root, params.m_lag, params.lag_scale)
        s_nodes = _first_asset_price(spec, nodes)
        prices = bs_call_price(s_nodes, spec.K[0], spec.mu0, spec.vols[0], spec.horizon_gap)
        g = (flat[pos, None] - prices > 0.0).astype(np.float64)
        h[pos] = np.clip(np.sum(weights * g, axis=1), 0.0, 1.0)
    shape = loss_rest.shape
    return h.reshape(shape), roots.reshape(shape), iters.reshape(shape)
