"""Computable achievability and converse quantities.

Covers the joint support/value error exponent and its numerical min-max
oracle, the union bound on large-error events for the ML estimator, the
converse constants and gamma range, the MSE lower bound, the combinatorial
matching coefficients, a Gaussian bilinear moment generating function and a
small-dimension Monte Carlo estimator of the divergence between the true
output density and its Gaussian surrogate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln, logsumexp

from .core import Alphabet, ProblemDims, effective_noise_variance
from .estimators import EnumerationError, _supports, _value_tuples, enumeration_size


def log_binom(n, k):
    """``log C(n, k)`` via log-gamma; ``-inf`` outside ``0 <= k <= n``."""
    n = np.asarray(n, dtype=float)
    k = np.asarray(k, dtype=float)
    with np.errstate(invalid="ignore"):
        out = gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
    out = np.where((k < 0) | (k > n), -np.inf, out)
    return float(out) if out.ndim == 0 else out


def thresholds(alphabet: Alphabet) -> tuple[float, float]:
    """(achievability threshold u_min^2/2, converse threshold u_max^2/2) on sigma^2."""
    return alphabet.u_min ** 2 / 2, alphabet.u_max ** 2 / 2


# ---------------------------------------------------------------------------
# error exponent


def _check_wp(w: int, w_prime: int, alphabet: Alphabet) -> float:
    if w < 1 or w_prime < 0:
        raise ValueError(f"need w >= 1 and w' >= 0, got ({w}, {w_prime})")
    if alphabet.M == 1 and w_prime > 0:
        raise ValueError("value errors (w' > 0) are impossible for a one-point alphabet")
    return 0.0 if w_prime == 0 else alphabet.d_min ** 2


def reliability_function(w: int, w_prime: int, sigma_sq: float,
                         alphabet: Alphabet) -> float:
    """Closed-form error exponent for ``w`` support and ``w'`` value errors."""
    dmin2 = _check_wp(w, w_prime, alphabet)
    u2 = alphabet.u_min ** 2
    a0 = u2 * w + dmin2 * w_prime
    if sigma_sq < u2 / 8:
        return (u2 / (4 * sigma_sq) - 1) * w + dmin2 * w_prime / (8 * sigma_sq)
    if sigma_sq < u2 / 2:
        num = 2 * (u2 - math.sqrt(2 * sigma_sq * u2)) * w + dmin2 * w_prime
        return num * num / (8 * sigma_sq * a0)
    if sigma_sq < a0 / (2 * w):
        num = (u2 - 2 * sigma_sq) * w + dmin2 * w_prime
        return num * num / (8 * sigma_sq * a0)
    return 0.0


def _exponent_surface(rho, a, b, sigma_sq, w):
    return (a + b) ** 2 * rho / (8 * sigma_sq * (a * rho + b)) - rho * w


def _max_over_rho(a, b, sigma_sq, w, iters: int = 80):
    """Golden-section maximisation over rho in [0, 1], vectorised over (a, b)."""
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    g = (math.sqrt(5) - 1) / 2
    lo = np.zeros(a.shape)
    hi = np.ones(a.shape)
    c = hi - g * (hi - lo)
    d = lo + g * (hi - lo)
    fc = _exponent_surface(c, a, b, sigma_sq, w)
    fd = _exponent_surface(d, a, b, sigma_sq, w)
    for _ in range(iters):
        left = fc > fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        new_c = hi - g * (hi - lo)
        new_d = lo + g * (hi - lo)
        fd_next = np.where(left, fc, _exponent_surface(new_d, a, b, sigma_sq, w))
        fc_next = np.where(left, _exponent_surface(new_c, a, b, sigma_sq, w), fd)
        c, d, fc, fd = new_c, new_d, fc_next, fd_next
    best = np.maximum(fc, fd)
    ends = np.maximum(_exponent_surface(0.0, a, b, sigma_sq, w),
                      _exponent_surface(1.0, a, b, sigma_sq, w))
    return np.maximum(best, ends)


def reliability_oracle(w: int, w_prime: int, sigma_sq: float, alphabet: Alphabet,
                       grid: int = 400, box: float = 10.0) -> float:
    """Numerical min over (a, b) of max over rho of the Gallager exponent surface.

    ``a`` ranges over ``[a0, box * a0]`` and ``b`` over ``[b0, box * b0]`` with
    ``a0 = u_min^2 w + d_min^2 w'`` and ``b0 = u_min^2 w``.  A ``grid x grid``
    scan is refined by a bounded quasi-Newton search from the best node.
    """
    dmin2 = _check_wp(w, w_prime, alphabet)
    u2 = alphabet.u_min ** 2
    a0 = u2 * w + dmin2 * w_prime
    b0 = u2 * w
    av = np.linspace(a0, box * a0, grid)
    bv = np.linspace(b0, box * b0, grid)
    vals = _max_over_rho(av[:, None], bv[None, :], sigma_sq, w)
    i, j = np.unravel_index(int(np.argmin(vals)), vals.shape)
    best = float(vals[i, j])

    def outer(p):
        return float(_max_over_rho(p[0], p[1], sigma_sq, w))

    res = minimize(outer, x0=[av[i], bv[j]], method="L-BFGS-B",
                   bounds=[(a0, box * a0), (b0, box * b0)])
    return max(0.0, min(best, float(res.fun)))


# ---------------------------------------------------------------------------
# union bound for the ML estimator


def truncation_level(dims: ProblemDims) -> int:
    """``d = ceil(k / sqrt(ln(N/k)))``."""
    return math.ceil(dims.k / math.sqrt(dims.log_ratio))


@dataclass(frozen=True)
class GallagerParams:
    w: int
    w_prime: int
    sigma_sq: float
    alphabet: Alphabet
    dims: ProblemDims

    def __post_init__(self):
        if not 0 <= self.w <= self.dims.k:
            raise ValueError(f"w={self.w} outside [0, k]")
        if not 0 <= self.w_prime <= self.dims.k - self.w:
            raise ValueError(f"w'={self.w_prime} outside [0, k - w]")

    @property
    def d(self) -> int:
        return truncation_level(self.dims)


def log_gallager_type_bound(params: GallagerParams) -> float:
    """Natural log of the per-type union bound; ``-inf`` for impossible types."""
    w, wp, k = params.w, params.w_prime, params.dims.k
    M = params.alphabet.M
    if wp > 0 and M == 1:
        return -math.inf
    log_nk = params.dims.log_ratio
    out = wp * math.log(M - 1) if wp > 0 else 0.0
    if w == 0:
        if wp == 0:
            return 0.0
        out += log_binom(k, wp)
        return out - params.alphabet.d_min ** 2 * wp / (8 * params.sigma_sq) * log_nk
    out += w * math.log(math.e * k / w) + log_binom(k - w, wp) + w * math.log(M)
    return out - reliability_function(w, wp, params.sigma_sq, params.alphabet) * log_nk


def gallager_type_bound(params: GallagerParams) -> float:
    return math.exp(log_gallager_type_bound(params))


def log_error_prob_bound_total(dims: ProblemDims, alphabet: Alphabet,
                               sigma_sq: float) -> float:
    """Log of the union bound on ``P(||x - x_ML||^2 >= max(2 u_max^2, d_max^2) d)``."""
    d = truncation_level(dims)
    terms = []
    for w in range(dims.k + 1):
        for wp in range(dims.k - w + 1):
            if w + wp >= d:
                t = log_gallager_type_bound(GallagerParams(w, wp, sigma_sq, alphabet, dims))
                if t > -math.inf:
                    terms.append(t)
    if not terms:
        return -math.inf
    return float(np.logaddexp.reduce(np.sort(terms)))


def error_prob_bound_total(dims: ProblemDims, alphabet: Alphabet,
                           sigma_sq: float) -> float:
    """Raw (unclamped) union bound; may exceed 1 in the high-noise regime."""
    lg = log_error_prob_bound_total(dims, alphabet, sigma_sq)
    return math.inf if lg > 709.0 else math.exp(lg)


def large_error_level(alphabet: Alphabet, dims: ProblemDims) -> float:
    """Unnormalised squared-error level ``max(2 u_max^2, d_max^2) d`` defining the event."""
    dmax2 = alphabet.d_max ** 2 if alphabet.d_max is not None else 0.0
    return max(2 * alphabet.u_max ** 2, dmax2) * truncation_level(dims)


# ---------------------------------------------------------------------------
# converse


@dataclass(frozen=True)
class ConverseConstants:
    C0: float
    C1_1: float
    C1_2: float
    gamma_max: float
    valid: bool

    @property
    def C1(self) -> float:
        return self.C1_1 + self.C1_2


def converse_constants(sigma_sq: float, alphabet: Alphabet) -> ConverseConstants:
    """Constants bounding the sparsity exponent range of the strong converse.

    ``valid`` is False below the converse threshold ``u_max^2 / 2``; the
    returned ``gamma_max`` is then clipped to 0.
    """
    umax, umin = alphabet.u_max, alphabet.u_min
    slack = 1 - umax ** 2 / (2 * sigma_sq)
    c0 = sigma_sq / umax ** 2 * slack
    c11 = sigma_sq / (2 * umax ** 2) * slack ** 2
    c12 = (umax - umin / 2) ** 2 / (2 * sigma_sq)
    c1 = c11 + c12
    first = c0 / (c0 + sigma_sq / (umax * umin))
    gamma = min(first, c1 / (c1 + 3), 0.5)
    valid = sigma_sq > umax ** 2 / 2
    return ConverseConstants(c0, c11, c12, max(0.0, gamma) if valid else 0.0, valid)


@dataclass(frozen=True)
class MseBoundParams:
    alpha: float
    u_max: float
    Ex2_over_k: float
    J: float = 0.0


def f_alpha(alpha: float, u_max: float) -> float:
    """``sqrt((1 - u^4 a^2) / (1 - 2 u^2 a)) - 1``."""
    u2 = u_max ** 2
    return math.expm1(0.5 * (math.log1p(-(u2 * alpha) ** 2) - math.log1p(-2 * u2 * alpha)))


def log_c_n(params: MseBoundParams, dims: ProblemDims) -> float:
    a, u2 = params.alpha, params.u_max ** 2
    growth = math.expm1(dims.k * math.log1p(1 / (dims.N / dims.k - 1)))
    return (math.log1p(-(u2 * a) ** 2) + a * params.Ex2_over_k
            - 2 * math.log1p(f_alpha(a, params.u_max) * growth))


def mse_lower_bound(params: MseBoundParams, dims: ProblemDims) -> float:
    """Lower bound on ``E||x - xhat||^2 / k`` valid for any estimator."""
    a = params.alpha
    if not 0 < a < 1 / (2 * params.u_max ** 2):
        raise ValueError(f"alpha must lie in (0, {1 / (2 * params.u_max ** 2)}), got {a}")
    if params.J < 0:
        raise ValueError("J must be non-negative")
    return math.expm1(log_c_n(params, dims) - 2 * params.J) / a


# ---------------------------------------------------------------------------
# combinatorial coefficients


def matching_coefficients(w: int, w_prime: int, k: int) -> tuple[float, int]:
    """(L, ceil(L)) with ``L = prod_{i<w'-w} (w'-i)/(k-w-i)`` = ``C(k,w)/C(k,w')``.

    ``w == w'`` gives the empty product 1.
    """
    if not 0 <= w <= w_prime <= k:
        raise ValueError(f"need 0 <= w <= w' <= k, got ({w}, {w_prime}, {k})")
    val = Fraction(1)
    for i in range(w_prime - w):
        val *= Fraction(w_prime - i, k - w - i)
    return float(val), math.ceil(val)


def h_coeff(w: int, j: int, k: int) -> int:
    """Covering multiplicity ``H_w(j)``; equal to 1 for ``w = 0`` and ``w = k``."""
    if not 0 <= w <= k or not 0 <= j <= k:
        raise ValueError(f"need 0 <= w, j <= k, got w={w}, j={j}, k={k}")
    if w == 0 or w == k:
        return 1
    total = 0
    for wp in range(max(j - w, 0), min(j, k - w) + 1):
        total += math.comb(j, wp) * matching_coefficients(k - w - wp, k - j, k - j)[1]
    return total


def log_binomial_ratio_bound(N: int, k: int, w: int) -> tuple[float, float]:
    """(log C(N,k)^{-1} C(N-k,w), log (N/k - 1)^{w-k}); the first is smaller."""
    return (log_binom(N - k, w) - log_binom(N, k), (w - k) * math.log(N / k - 1))


def gaussian_bilinear_mgf(v: float, u1, u2) -> float:
    """``E exp(a.u1 (v a.u1 + a.u2))`` for standard Gaussian ``a``."""
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    det = (1 - u2 @ u1) ** 2 - (2 * v + u2 @ u2) * (u1 @ u1)
    if det <= 0:
        raise ArithmeticError(f"moment generating function diverges (determinant {det:.3g})")
    return float(det ** -0.5)


# ---------------------------------------------------------------------------
# divergence from the Gaussian surrogate


@dataclass(frozen=True)
class KlEstimate:
    lam: float
    estimate: float
    std_err: float
    samples: int


def kl_estimate_small(dims: ProblemDims, alphabet: Alphabet, sigma_sq: float,
                      samples: int, rng: np.random.Generator,
                      limit: int = 10 ** 6, chunk: int = 20000) -> KlEstimate:
    """Monte Carlo estimate of ``D(p || q)``.

    ``p`` is the exact output mixture over all k-sparse signals and ``q`` the
    zero-mean Gaussian with the same per-coordinate power.
    """
    if enumeration_size(dims.N, dims.k, alphabet.M) > limit:
        raise EnumerationError("too many candidates for the exact output density")
    s2 = effective_noise_variance(sigma_sq, dims)
    supports = _supports(dims.N, dims.k)
    vals = _value_tuples(alphabet.array, dims.k)
    cand = np.zeros((supports.shape[0] * vals.shape[0], dims.N))
    rows = np.repeat(np.arange(cand.shape[0]), dims.k)
    cand[rows, np.repeat(supports, vals.shape[0], axis=0).ravel()] = np.tile(vals, (supports.shape[0], 1)).ravel()
    half_energy = 0.5 * np.sum(cand * cand, axis=1)
    lam = 1 + dims.k * alphabet.mean_power / (dims.N * s2)
    log_count = math.log(cand.shape[0])

    out = np.empty(samples)
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        idx = rng.integers(0, cand.shape[0], size=m)
        y = cand[idx] + math.sqrt(s2) * rng.standard_normal((m, dims.N))
        mix = logsumexp((y @ cand.T - half_energy) / s2, axis=1) - log_count
        energy = np.sum(y * y, axis=1)
        out[done:done + m] = (0.5 * dims.N * math.log(lam)
                              - (lam - 1) * energy / (2 * lam * s2) + mix)
        done += m
    return KlEstimate(lam, float(out.mean()), float(out.std(ddof=1) / math.sqrt(samples)), samples)
