"""Shared numerical kernels: counter-addressed random streams, the normal
distribution, Cholesky factorisation and scrambled Sobol' point sets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numba
import numpy as np
from scipy.special import ndtr
from scipy.stats import qmc

__all__ = [
    "NotPositiveDefiniteError",
    "RngStream",
    "PointSet",
    "cholesky",
    "std_normal_cdf",
    "std_normal_inv_cdf",
    "normal_vector",
    "scrambled_net",
    "sobol_direction_numbers",
    "net_scrambling",
    "pseudo_random_points",
]

_U53 = 2.0**-53
_NET_BITS = 32


class NotPositiveDefiniteError(ValueError):
    """Raised by :func:`cholesky` when a pivot is not strictly positive."""

    def __init__(self, index: int, pivot: float):
        super().__init__(
            f"matrix not positive definite: pivot {index} is {pivot!r}"
        )
        self.index = index
        self.pivot = pivot


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RngStream:
    """A counter-based random stream.

    Draw ``i`` of the stream is a pure function of ``(seed, stream_id, i)``,
    so any window of the stream can be generated directly without replaying
    earlier draws.  The Philox-4x64 key is derived from ``(seed, stream_id)``
    and the draw index selects the counter block.

    Samplers give every (level, purpose) pair its own ``stream_id`` and
    address outer sample ``i`` as the window ``[i * B, (i + 1) * B)`` of
    that stream, where ``B`` is the per-sample block length.
    """

    seed: int
    stream_id: int
    _key: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.seed < 0 or self.stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")
        key = np.random.SeedSequence([self.seed, self.stream_id]).generate_state(
            2, np.uint64
        )
        object.__setattr__(self, "_key", key)

    def raw(self, start: int, count: int) -> np.ndarray:
        """Raw 64-bit words ``start, ..., start + count - 1``."""
        if start < 0 or count < 0:
            raise ValueError("start and count must be non-negative")
        block, offset = divmod(start, 4)
        counter = np.array([block & 0xFFFFFFFFFFFFFFFF, block >> 64, 0, 0],
                           dtype=np.uint64)
        bg = np.random.Philox(key=self._key, counter=counter)
        out = bg.random_raw(offset + count)
        return out[offset:]

    def uniforms(self, start: int, count: int) -> np.ndarray:
        """Uniforms on the open interval (0, 1) with 53-bit resolution."""
        return raw_to_uniform(self.raw(start, count))

    def normals(self, start: int, count: int) -> np.ndarray:
        """Standard normals by inverse-CDF transport of :meth:`uniforms`."""
        return std_normal_inv_cdf(self.uniforms(start, count))


def raw_to_uniform(raw: np.ndarray) -> np.ndarray:
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _U53


def normal_vector(stream: RngStream, n: int, start: int = 0) -> np.ndarray:
    """``n`` i.i.d. N(0, 1) draws taken from ``stream`` at draw index ``start``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return stream.normals(start, n)


# ---------------------------------------------------------------------------
# Normal distribution
# ---------------------------------------------------------------------------


def std_normal_cdf(x):
    """Standard normal CDF, accurate to ~1e-16 absolute."""
    return ndtr(x)


# Wichura (1988), algorithm AS241 PPND16: rational approximations with
# relative accuracy about 1e-16 over (0, 1).
_A = (3.387132872796366608, 133.14166789178437745, 1971.5909503065514427,
      13731.693765509461125, 45921.953931549871457, 67265.770927008700853,
      33430.575583588128105, 2509.0809287301226727)
_B = (1.0, 42.313330701600911252, 687.1870074920579083, 5394.1960214247511077,
      21213.794301586595867, 39307.89580009271061, 28729.085735721942674,
      5226.495278852545925)
_C = (1.42343711074968357734, 4.6303378461565452959, 5.7694972214606914055,
      3.64784832476320460504, 1.27045825245236838258, 0.24178072517745061177,
      0.0227238449892691845833, 7.7454501427834140764e-4)
_D = (1.0, 2.05319162663775882187, 1.6763848301838038494,
      0.68976733498510000455, 0.14810397642748007459, 0.0151986665636164571966,
      5.475938084995344946e-4, 1.05075007164441684324e-9)
_E = (6.6579046435011037772, 5.4637849111641143699, 1.7848265399172913358,
      0.29656057182850489123, 0.026532189526576123093, 0.0012426609473880784386,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 0.59983220655588793769, 0.13692988092273580531,
      0.0148753612908506148525, 7.868691311456132591e-4,
      1.8463183175100546818e-5, 1.4215117583164458887e-7,
      2.04426310338993978564e-15)


@numba.njit(cache=True, error_model="numpy")
def _poly(c, x):
    r = c[7]
    for i in range(6, -1, -1):
        r = r * x + c[i]
    return r


@numba.njit(cache=True, error_model="numpy")
def ndtri_scalar(p):
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly(_A, r) / _poly(_B, r)
    r = p if q < 0.0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        val = _poly(_C, r) / _poly(_D, r)
    else:
        r -= 5.0
        val = _poly(_E, r) / _poly(_F, r)
    return -val if q < 0.0 else val


@numba.vectorize(["float64(float64)"], cache=True)
def _ndtri_ufunc(p):
    return ndtri_scalar(p)


def std_normal_inv_cdf(p):
    """Inverse standard normal CDF.

    Raises ``ValueError`` for any ``p`` outside the open interval (0, 1).
    """
    arr = np.asarray(p, dtype=np.float64)
    if not np.all((arr > 0.0) & (arr < 1.0)):
        raise ValueError("std_normal_inv_cdf is defined on the open interval (0, 1)")
    out = _ndtri_ufunc(arr)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Cholesky
# ---------------------------------------------------------------------------


def cholesky(C) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == C``.

    The factor is returned as a read-only array.  Raises
    :class:`NotPositiveDefiniteError` naming the first failing pivot.
    """
    C = np.array(C, dtype=np.float64, ndmin=2)
    n = C.shape[0]
    if C.shape != (n, n):
        raise ValueError("C must be square")
    if not np.allclose(C, C.T, rtol=1e-12, atol=0.0):
        raise ValueError("C must be symmetric")
    L = np.zeros_like(C)
    for j in range(n):
        pivot = C[j, j] - L[j, :j] @ L[j, :j]
        if not pivot > 0.0:
            raise NotPositiveDefiniteError(j, float(pivot))
        L[j, j] = math.sqrt(pivot)
        for i in range(j + 1, n):
            L[i, j] = (C[i, j] - L[i, :j] @ L[j, :j]) / L[j, j]
    L.setflags(write=False)
    return L


# ---------------------------------------------------------------------------
# Scrambled Sobol' nets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PointSet:
    """``m`` points in ``[0, 1)^s`` together with their provenance."""

    points: np.ndarray
    kind: str
    scramble_seed: int

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def s(self) -> int:
        return self.points.shape[1]


@lru_cache(maxsize=None)
def sobol_direction_numbers(s: int, k: int) -> np.ndarray:
    """Direction numbers ``v[j, b]`` (32-bit) of the first ``2**k`` Sobol' points.

    The numbers are read off scipy's unscrambled generator, which emits points
    in Gray-code order: point ``2**b`` differs from point ``2**b - 1`` by
    exactly ``v[:, b]``.
    """
    if s < 1 or k < 0:
        raise ValueError("need s >= 1 and k >= 0")
    n = max(2 ** k, 2)
    pts = qmc.Sobol(s, scramble=False, bits=_NET_BITS).random(n)
    ints = np.round(pts * 2.0**_NET_BITS).astype(np.uint64)
    v = np.empty((s, max(k, 1)), dtype=np.uint64)
    for b in range(max(k, 1)):
        v[:, b] = ints[2 ** b] ^ ints[2 ** b - 1]
    v = v[:, :k].copy()
    v.setflags(write=False)
    return v


@numba.njit(cache=True)
def _parity(x):
    x ^= x >> np.uint64(16)
    x ^= x >> np.uint64(8)
    x ^= x >> np.uint64(4)
    x ^= x >> np.uint64(2)
    x ^= x >> np.uint64(1)
    return x & np.uint64(1)


@numba.njit(cache=True)
def scramble_directions(v, lms_bits, shift_bits, out_v, out_shift):
    """Linear matrix scrambling plus digital shift of direction numbers.

    ``v`` has shape (s, k).  ``lms_bits`` (s, 32) supplies, for output digit
    ``r`` (0 = most significant), the random mask of more significant digits
    that feed it; the diagonal is forced to one so the matrix is invertible.
    """
    s, k = v.shape
    one = np.uint64(1)
    for j in range(s):
        for b in range(k):
            x = v[j, b]
            y = np.uint64(0)
            for r in range(32):
                pos = np.uint64(31 - r)
                # mask of digits 0..r-1 (bit positions 31..32-r) plus digit r
                upper = np.uint64(0xFFFFFFFF) ^ ((one << (pos + one)) - one)
                row = (lms_bits[j, r] & upper) | (one << pos)
                y |= _parity(row & x) << pos
            out_v[j, b] = y
        out_shift[j] = shift_bits[j] & np.uint64(0xFFFFFFFF)


def net_scrambling(stream: RngStream, start: int, s: int, k: int):
    """Scrambled direction numbers and shifts drawn from ``stream``.

    Uses ``s * 33`` raw words from draw index ``start``.
    """
    raw = stream.raw(start, s * 33).reshape(s, 33)
    v = sobol_direction_numbers(s, k)
    out_v = np.empty((s, k), dtype=np.uint64)
    out_shift = np.empty(s, dtype=np.uint64)
    scramble_directions(v, raw[:, :32], raw[:, 32], out_v, out_shift)
    return out_v, out_shift


@numba.njit(cache=True)
def gray_code_points(v, shift, m, out):
    """Write the ``m`` scrambled net points (as uint32 integers) into ``out``."""
    s = v.shape[0]
    x = shift.copy()
    for j in range(s):
        out[0, j] = x[j]
    for i in range(1, m):
        c = 0
        t = i
        while t & 1 == 0:
            t >>= 1
            c += 1
        for j in range(s):
            x[j] ^= v[j, c]
            out[i, j] = x[j]


def scrambled_net(m: int, s: int, scramble_seed: int) -> PointSet:
    """First ``m`` points of an s-dimensional scrambled Sobol' sequence.

    ``m`` must be a power of two.  The randomisation is a random linear
    matrix scramble followed by a digital shift; every one-dimensional
    projection keeps one point per interval ``[j/m, (j+1)/m)``.
    """
    if m < 1 or m & (m - 1):
        raise ValueError(f"m must be a power of 2, got {m}")
    if s < 1:
        raise ValueError("s must be >= 1")
    k = m.bit_length() - 1
    v, shift = net_scrambling(RngStream(scramble_seed, 0), 0, s, k)
    ints = np.empty((m, s), dtype=np.uint64)
    gray_code_points(v, shift, m, ints)
    pts = (ints.astype(np.float64) + 0.5) * 2.0**-_NET_BITS
    return PointSet(pts, "scrambled-net", scramble_seed)


def pseudo_random_points(m: int, s: int, seed: int) -> PointSet:
    """Plain Monte Carlo counterpart of :func:`scrambled_net`."""
    u = RngStream(seed, 1).uniforms(0, m * s).reshape(m, s)
    return PointSet(u, "pseudo-random", seed)
