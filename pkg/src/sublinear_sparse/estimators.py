"""Signal estimators for the scaled AWGN channel.

ML detection reduces to order statistics: only the ``k`` largest and ``k``
smallest observations can carry non-zero estimates, and the split between
them is found by a sweep over ``k0``.  The non-separable Bayesian estimator
reuses the same sweep on leave-one-out observation vectors; because removing
one element shifts ranks by at most one, all ``N`` leave-one-out minima come
from ``O(k)`` distinct rank cases.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from scipy.special import comb, logsumexp

from .core import Alphabet, DimensionError, ProblemDims, SparseSignal

ENUMERATION_LIMIT = 10 ** 7

# Test hooks used by ``verify`` negative controls.
_FAULTS: set[str] = set()


@contextlib.contextmanager
def inject_fault(name: str):
    """Temporarily enable a named fault (``"flip-kstar"``) in the ML sweep."""
    _FAULTS.add(name)
    try:
        yield
    finally:
        _FAULTS.discard(name)


class EnumerationError(ValueError):
    """Raised when exhaustive enumeration would exceed the feasibility guard."""


def residual(y, x) -> np.ndarray | float:
    """Squared distance ``||y - x||^2`` along the last axis.

    Both the order-statistics ML estimator and the brute-force oracle report
    their objective through this function so the two are bit-comparable.
    """
    d = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    out = np.sum(d * d, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# elementwise helpers


def hard_decision(y_n: float, alphabet: Alphabet) -> float:
    """Nearest alphabet point; the first listed point wins ties."""
    pts = alphabet.array
    return float(pts[int(np.argmin((y_n - pts) ** 2))])


def _nearest(y: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts[np.argmin((y[..., None] - pts) ** 2, axis=-1)]


def _penalty(y: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """``min_u (y - u)^2 - y^2``: cost change from switching ``y`` on."""
    return np.min((y[..., None] - pts) ** 2, axis=-1) - y * y


def _rank_windows(y: np.ndarray, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ``width`` largest and ``width`` smallest entries.

    Both arrays are in descending order of value with ties broken by index,
    i.e. they agree with ``np.argsort(-y, kind="stable")`` restricted to its
    first and last ``width`` positions.  Selection is linear time.
    """
    n = y.size
    if width == 0:
        empty = np.empty(0, dtype=int)
        return empty, empty
    if n <= 4 * width:
        order = np.argsort(-y, kind="stable")
        return order[:width], order[n - width:]
    hi = -np.partition(-y, width - 1)[width - 1]
    above = np.flatnonzero(y > hi)
    ties = np.flatnonzero(y == hi)[: width - above.size]
    top = np.concatenate([above, ties])
    top = top[np.lexsort((top, -y[top]))]
    lo = np.partition(y, width - 1)[width - 1]
    below = np.flatnonzero(y < lo)
    ties = np.flatnonzero(y == lo)
    ties = ties[ties.size - (width - below.size):]
    bot = np.concatenate([below, ties])
    bot = bot[np.lexsort((bot, -y[bot]))]
    return top, bot


def _sweep(pen_top: np.ndarray, pen_bot: np.ndarray, j: int) -> np.ndarray:
    """Penalty totals for ``k0 = 0..j``: top-``k0`` plus bottom-``(j - k0)``.

    Works on the last axis so that many rank cases are swept at once.
    ``pen_bot`` is in descending order of value (its last entry is the
    minimum of the observation vector).
    """
    shape = pen_top.shape[:-1]
    zero = np.zeros(shape + (1,))
    a = np.concatenate([zero, np.cumsum(pen_top[..., :j], axis=-1)], axis=-1)
    rev = pen_bot[..., ::-1]
    b = np.concatenate([zero, np.cumsum(rev[..., :j], axis=-1)], axis=-1)
    return a + b[..., ::-1]


# ---------------------------------------------------------------------------
# ML via order statistics


@dataclass(frozen=True)
class XiProfile:
    xi_values: np.ndarray
    k_star: int
    total_sq: float
    boundary_top: np.ndarray
    boundary_bottom: np.ndarray
    top_idx: np.ndarray
    bottom_idx: np.ndarray

    @property
    def boundary_terms(self) -> tuple[np.ndarray, np.ndarray]:
        return self.boundary_top, self.boundary_bottom


def xi_profile(y, k: int, alphabet: Alphabet) -> XiProfile:
    """ML objective as a function of the number ``k0`` of top-ranked non-zeros.

    ``xi_values[k0]`` is the residual of the best candidate that places
    ``k0`` non-zeros on the largest observations and ``k - k0`` on the
    smallest ones.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.size < 2 * k:
        raise DimensionError(f"need a vector of length >= 2k = {2 * k}, got shape {y.shape}")
    if k < 0:
        raise DimensionError("k must be non-negative")
    pts = alphabet.array
    top, bot = _rank_windows(y, k)
    pen_top = _penalty(y[top], pts)
    pen_bot = _penalty(y[bot], pts)
    total = float(y @ y)
    xi = total + _sweep(pen_top, pen_bot, k)
    k_star = int(np.argmax(xi) if "flip-kstar" in _FAULTS else np.argmin(xi))
    return XiProfile(xi, k_star, total, pen_top, pen_bot, top, bot)


def ml_estimate(y, dims: ProblemDims, alphabet: Alphabet) -> SparseSignal:
    """Maximum-likelihood estimate over all k-sparse vectors with values in the alphabet."""
    y = np.asarray(y, dtype=float)
    if y.shape != (dims.N,):
        raise DimensionError(f"y has shape {y.shape}, expected ({dims.N},)")
    prof = xi_profile(y, dims.k, alphabet)
    ks = prof.k_star
    support = np.concatenate([prof.top_idx[:ks], prof.bottom_idx[ks:]])
    values = _nearest(y[support], alphabet.array)
    return SparseSignal.from_arrays(dims.N, support, values)


# ---------------------------------------------------------------------------
# error classification


@dataclass(frozen=True)
class ErrorType:
    w: int
    w_prime: int


def classify_error(x: SparseSignal, xhat: SparseSignal) -> ErrorType:
    """Count support misses ``w`` and value errors ``w'`` on the common support."""
    if x.n != xhat.n:
        raise DimensionError("signals have different lengths")
    true = dict(zip(x.support, x.values))
    est = dict(zip(xhat.support, xhat.values))
    w = sum(1 for n in true if n not in est)
    w_prime = sum(1 for n, v in true.items() if n in est and est[n] != v)
    return ErrorType(w, w_prime)


# ---------------------------------------------------------------------------
# Bayesian estimators


def _mean_from_logits(logits: np.ndarray, pts: np.ndarray,
                      sigma_sq: float) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and its derivative for the mixture {0} + {u_m}.

    ``logits[..., m]`` is the log posterior odds of ``u_m`` against zero.
    The derivative assumes ``d logits / d y = u_m / sigma_sq``.
    """
    c = np.maximum(0.0, logits.max(axis=-1))
    e0 = np.exp(-c)
    em = np.exp(logits - c[..., None])
    z = e0 + np.sum(em, axis=-1)
    mean = np.sum(pts * em, axis=-1) / z
    second = np.sum(pts * pts * em, axis=-1) / z
    deriv = (second - mean * mean) / sigma_sq
    return mean, deriv


def _separable_logits(y: np.ndarray, dims: ProblemDims, pts: np.ndarray,
                      sigma_eff_sq: float) -> np.ndarray:
    prior = math.log(dims.k / (pts.size * (dims.N - dims.k)))
    return prior + (y[:, None] * pts - 0.5 * pts * pts) / sigma_eff_sq


def separable_bayes(y, dims: ProblemDims, alphabet: Alphabet,
                    sigma_eff_sq: float) -> np.ndarray:
    """Elementwise posterior mean under the marginal prior.

    Each entry is non-zero with probability ``k/N`` and then uniform over the
    alphabet, independently of the others.
    """
    return separable_bayes_with_derivative(y, dims, alphabet, sigma_eff_sq)[0]


def separable_bayes_with_derivative(y, dims, alphabet, sigma_eff_sq):
    if dims.N <= dims.k:
        raise DimensionError("separable estimator needs N > k")
    y = np.asarray(y, dtype=float)
    pts = alphabet.array
    return _mean_from_logits(_separable_logits(y, dims, pts, sigma_eff_sq), pts, sigma_eff_sq)


class DenoiserContext:
    """Leave-one-out ML gaps for every coordinate of an observation vector.

    ``gap[n]`` equals ``min xi_{k-1}^{N-1}(y_without_n) - min xi_k^{N-1}(y_without_n)``
    with the common ``||y_without_n||^2`` term dropped.  Only coordinates
    inside the top/bottom ``k+1`` rank windows see a distinct value; all
    others share one.
    """

    def __init__(self, y, k: int, alphabet: Alphabet):
        y = np.asarray(y, dtype=float)
        n = y.size
        if n - 1 < 2 * k:
            raise DimensionError(f"leave-one-out sweep needs N - 1 >= 2k, got N={n}, k={k}")
        self.y = y
        self.k = k
        self.alphabet = alphabet
        w = k + 1
        self.top_idx, self.bottom_idx = _rank_windows(y, w)
        pts = alphabet.array
        pen_top = _penalty(y[self.top_idx], pts)
        pen_bot = _penalty(y[self.bottom_idx], pts)
        first_bottom = n - w

        # rank cases: every rank inside either window, plus one interior rank
        ranks = sorted(set(range(w)) | set(range(first_bottom, n)))
        interior = next((r for r in range(w, first_bottom)), None)
        if interior is not None:
            ranks.append(interior)
        ranks = np.asarray(ranks)
        base = np.arange(k)
        r_top = np.minimum(ranks, w)[:, None]
        sel_top = base + (base >= r_top)
        q = np.clip(ranks - first_bottom, 0, None)[:, None]
        sel_bot = base + (base >= q)
        pt = pen_top[sel_top]
        pb = pen_bot[sel_bot]
        min_k = _sweep(pt, pb, k).min(axis=-1)
        min_km1 = _sweep(pt[:, :k - 1], pb[:, 1:], k - 1).min(axis=-1)
        gaps = min_km1 - min_k

        case = {int(r): g for r, g in zip(ranks, gaps)}
        self.gap = np.full(n, case[interior] if interior is not None else np.nan)
        self.gap[self.top_idx] = [case[r] for r in range(w)]
        self.gap[self.bottom_idx] = [case[r] for r in range(first_bottom, n)]

    def ell(self) -> np.ndarray:
        """``ell[n, m] = u_m^2 + gap[n]``."""
        pts = self.alphabet.array
        return pts * pts + self.gap[:, None]


def ell_m(y_minus_n, m: int, dims: ProblemDims, alphabet: Alphabet) -> float:
    """``u_m^2 + min xi_{k-1}^{N-1} - min xi_k^{N-1}`` for a leave-one-out vector.

    ``dims`` describes the full problem; ``y_minus_n`` has length ``N - 1``.
    """
    y_minus_n = np.asarray(y_minus_n, dtype=float)
    if y_minus_n.shape != (dims.N - 1,):
        raise DimensionError(f"expected length {dims.N - 1}, got {y_minus_n.shape}")
    if dims.N - 1 < 2 * dims.k:
        raise DimensionError("need N - 1 >= 2k")
    lo = xi_profile(y_minus_n, dims.k - 1, alphabet)
    hi = xi_profile(y_minus_n, dims.k, alphabet)
    u = alphabet.points[m]
    return u * u + float(lo.xi_values.min()) - float(hi.xi_values.min())


def _nonseparable_logits(y, ell, pts, sigma_eff_sq):
    return (y[:, None] * pts - 0.5 * ell) / sigma_eff_sq - math.log(pts.size)


def nonseparable_bayes(y, dims: ProblemDims, alphabet: Alphabet,
                       sigma_eff_sq: float) -> np.ndarray:
    """Max-log approximation of the posterior mean (non-separable in ``y``)."""
    return nonseparable_bayes_with_derivative(y, dims, alphabet, sigma_eff_sq)[0]


def nonseparable_bayes_with_derivative(y, dims, alphabet, sigma_eff_sq):
    """Estimate plus ``d xhat_n / d y_n``.

    The leave-one-out gaps do not depend on ``y_n``, so the own-coordinate
    derivative has the same closed form as in the separable case.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (dims.N,):
        raise DimensionError(f"y has shape {y.shape}, expected ({dims.N},)")
    ctx = DenoiserContext(y, dims.k, alphabet)
    pts = alphabet.array
    return _mean_from_logits(_nonseparable_logits(y, ctx.ell(), pts, sigma_eff_sq),
                             pts, sigma_eff_sq)


def nonseparable_bayes_naive(y, dims: ProblemDims, alphabet: Alphabet,
                             sigma_eff_sq: float) -> np.ndarray:
    """Reference implementation recomputing both sweeps for every coordinate."""
    y = np.asarray(y, dtype=float)
    pts = alphabet.array
    ell = np.empty((dims.N, pts.size))
    for n in range(dims.N):
        rest = np.delete(y, n)
        for m in range(pts.size):
            ell[n, m] = ell_m(rest, m, dims, alphabet)
    return _mean_from_logits(_nonseparable_logits(y, ell, pts, sigma_eff_sq),
                             pts, sigma_eff_sq)[0]


# ---------------------------------------------------------------------------
# exhaustive oracles


def enumeration_size(N: int, k: int, M: int) -> int:
    return int(comb(N, k, exact=True)) * M ** k


def _check_feasible(N: int, k: int, M: int, limit: int) -> None:
    size = enumeration_size(N, k, M)
    if size > limit:
        raise EnumerationError(f"C({N},{k}) * {M}^{k} = {size} exceeds limit {limit}")


def _supports(N: int, k: int) -> np.ndarray:
    if k == 0:
        return np.zeros((1, 0), dtype=int)
    return np.array(list(itertools.combinations(range(N), k)), dtype=int)


def _value_tuples(pts: np.ndarray, k: int) -> np.ndarray:
    if k == 0:
        return np.zeros((1, 0))
    return np.array(list(itertools.product(pts, repeat=k)), dtype=float).reshape(-1, k)


def enumerate_signals(N: int, k: int, alphabet: Alphabet,
                      limit: int = ENUMERATION_LIMIT) -> Iterator[np.ndarray]:
    """Yield dense candidates of the k-sparse set in lexicographic order.

    Candidates come in blocks (one per support) of shape ``(M^k, N)``.
    """
    _check_feasible(N, k, alphabet.M, limit)
    vals = _value_tuples(alphabet.array, k)
    for s in _supports(N, k):
        block = np.zeros((vals.shape[0], N))
        block[:, s] = vals
        yield block


def brute_force_ml(y, dims: ProblemDims, alphabet: Alphabet,
                   limit: int = ENUMERATION_LIMIT) -> SparseSignal:
    """Exhaustive residual minimisation; ties go to the lexicographically first candidate."""
    y = np.asarray(y, dtype=float)
    if y.shape != (dims.N,):
        raise DimensionError(f"y has shape {y.shape}, expected ({dims.N},)")
    best, best_x = math.inf, None
    for block in enumerate_signals(dims.N, dims.k, alphabet, limit):
        res = residual(y, block)
        i = int(np.argmin(res))
        if res[i] < best:
            best, best_x = res[i], block[i]
    return SparseSignal.from_dense(best_x)


def _log_weights(y_sub: np.ndarray, vals: np.ndarray, sigma_sq: float) -> np.ndarray:
    # log exp((x.y - |x|^2/2) / sigma^2) for each (support, value tuple)
    inv = 0.0 if math.isinf(sigma_sq) else 1.0 / sigma_sq
    return (y_sub @ vals.T - 0.5 * np.sum(vals * vals, axis=1)) * inv


def exact_posterior_mean(y, dims: ProblemDims, alphabet: Alphabet,
                         sigma_eff_sq: float,
                         limit: int = ENUMERATION_LIMIT) -> np.ndarray:
    """``E[x | y]`` by summing over every k-sparse candidate."""
    y = np.asarray(y, dtype=float)
    if y.shape != (dims.N,):
        raise DimensionError(f"y has shape {y.shape}, expected ({dims.N},)")
    _check_feasible(dims.N, dims.k, alphabet.M, limit)
    supports = _supports(dims.N, dims.k)
    vals = _value_tuples(alphabet.array, dims.k)
    logw = _log_weights(y[supports], vals, sigma_eff_sq)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    out = np.zeros(dims.N)
    per_support = w @ vals  # (S, k): weighted value at each support slot
    for j in range(dims.k):
        np.add.at(out, supports[:, j], per_support[:, j])
    return out


def log_partition(y, k: int, alphabet: Alphabet, sigma_sq: float,
                  limit: int = ENUMERATION_LIMIT) -> float:
    """``log sum_x exp(-||y - x||^2 / (2 sigma^2))`` over k-sparse candidates."""
    y = np.asarray(y, dtype=float)
    _check_feasible(y.size, k, alphabet.M, limit)
    supports = _supports(y.size, k)
    vals = _value_tuples(alphabet.array, k)
    logw = _log_weights(y[supports], vals, sigma_sq)
    return float(logsumexp(logw)) - float(y @ y) / (2 * sigma_sq)


def l_opt(y_minus_n, k: int, alphabet: Alphabet, sigma_sq: float) -> float:
    """Log ratio of the ``k``- and ``(k-1)``-sparse partition functions of ``y_without_n``."""
    return (log_partition(y_minus_n, k, alphabet, sigma_sq)
            - log_partition(y_minus_n, k - 1, alphabet, sigma_sq))


def posterior_mean_leave_one_out(y, dims: ProblemDims, alphabet: Alphabet,
                                 sigma_eff_sq: float) -> np.ndarray:
    """Exact posterior mean assembled coordinate by coordinate from ``l_opt``.

    Independent of :func:`exact_posterior_mean`.  The log odds of ``u_m``
    against zero are ``(u_m y_n - u_m^2/2)/sigma^2 - l_opt``; written with a
    per-value ``-log M`` prior term, ``l_opt`` absorbs a matching ``-log M``.
    """
    y = np.asarray(y, dtype=float)
    pts = alphabet.array
    out = np.empty(dims.N)
    for n in range(dims.N):
        lo = l_opt(np.delete(y, n), dims.k, alphabet, sigma_eff_sq)
        logits = (y[n] * pts - 0.5 * pts * pts) / sigma_eff_sq - lo
        out[n] = _mean_from_logits(logits[None, :], pts, sigma_eff_sq)[0][0]
    return out
