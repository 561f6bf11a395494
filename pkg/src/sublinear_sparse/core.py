"""Problem dimensions, signal alphabets, sparse signals and the square-error metric.

All logarithms are natural logarithms.  Indices are 0-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when problem dimensions are inconsistent or out of range."""


@dataclass(frozen=True)
class Alphabet:
    """Discrete set of non-zero signal amplitudes.

    ``d_min`` and ``d_max`` are ``None`` for single-point alphabets, where the
    pairwise distances are undefined.
    """

    points: tuple[float, ...]
    u_min: float = field(init=False)
    u_max: float = field(init=False)
    d_min: Optional[float] = field(init=False)
    d_max: Optional[float] = field(init=False)

    def __init__(self, points: Sequence[float]):
        pts = tuple(float(p) for p in points)
        if not pts:
            raise ValueError("alphabet must contain at least one point")
        if any(p == 0.0 or not math.isfinite(p) for p in pts):
            raise ValueError(f"alphabet points must be finite and non-zero: {pts}")
        if len(set(pts)) != len(pts):
            raise ValueError(f"alphabet points must be distinct: {pts}")
        object.__setattr__(self, "points", pts)
        mags = [abs(p) for p in pts]
        object.__setattr__(self, "u_min", min(mags))
        object.__setattr__(self, "u_max", max(mags))
        if len(pts) > 1:
            gaps = [abs(a - b) for i, a in enumerate(pts) for b in pts[i + 1:]]
            object.__setattr__(self, "d_min", min(gaps))
            object.__setattr__(self, "d_max", max(gaps))
        else:
            object.__setattr__(self, "d_min", None)
            object.__setattr__(self, "d_max", None)

    @property
    def M(self) -> int:
        return len(self.points)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)

    @property
    def mean_power(self) -> float:
        """Mean squared amplitude under uniform value sampling."""
        return float(np.mean(self.array ** 2))

    @classmethod
    def parse(cls, text: str) -> "Alphabet":
        """Build an alphabet from a comma-separated list such as ``"1,-1"``."""
        return cls([float(t) for t in text.split(",") if t.strip()])

    def __str__(self) -> str:
        return ",".join(f"{p:g}" for p in self.points)


@dataclass(frozen=True)
class ProblemDims:
    N: int
    k: int
    gamma: Optional[float] = None

    def __post_init__(self):
        if int(self.N) != self.N or int(self.k) != self.k:
            raise DimensionError("N and k must be integers")
        if self.k < 1:
            raise DimensionError(f"sparsity k must be >= 1, got {self.k}")
        # Top-k0 and bottom-(k-k0) rank windows must not overlap.
        if self.N < 2 * self.k:
            raise DimensionError(f"require N >= 2k, got N={self.N}, k={self.k}")
        if self.gamma is not None and not 0.0 <= self.gamma < 1.0:
            raise DimensionError(f"gamma must lie in [0, 1), got {self.gamma}")

    @property
    def log_ratio(self) -> float:
        """ln(N/k)."""
        return math.log(self.N / self.k)


def effective_noise_variance(sigma_sq: float, dims: ProblemDims) -> float:
    """Per-sample noise variance ``sigma_sq / ln(N/k)``."""
    if dims.N <= dims.k:
        raise DimensionError("effective noise variance needs N > k")
    return sigma_sq / math.log(dims.N / dims.k)


@dataclass(frozen=True)
class NoiseModel:
    sigma_sq: float
    sigma_eff_sq: float

    @classmethod
    def from_dims(cls, sigma_sq: float, dims: ProblemDims) -> "NoiseModel":
        if sigma_sq < 0:
            raise ValueError("sigma_sq must be non-negative")
        return cls(sigma_sq, effective_noise_variance(sigma_sq, dims))


@dataclass(frozen=True)
class SparseSignal:
    """k-sparse length-``n`` vector stored as (sorted support, values)."""

    n: int
    support: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.support) != len(self.values):
            raise DimensionError("support and values differ in length")
        if any(b <= a for a, b in zip(self.support, self.support[1:])):
            raise ValueError("support indices must be strictly increasing")
        if self.support and (self.support[0] < 0 or self.support[-1] >= self.n):
            raise DimensionError("support index out of range")

    @property
    def k(self) -> int:
        return len(self.support)

    def dense(self) -> np.ndarray:
        x = np.zeros(self.n)
        x[list(self.support)] = self.values
        return x

    def check_alphabet(self, alphabet: Alphabet) -> None:
        allowed = set(alphabet.points)
        bad = [v for v in self.values if v not in allowed]
        if bad:
            raise ValueError(f"values {bad} not in alphabet {alphabet.points}")

    @classmethod
    def from_arrays(cls, n: int, support, values) -> "SparseSignal":
        support = np.asarray(support, dtype=int)
        values = np.asarray(values, dtype=float)
        order = np.argsort(support, kind="stable")
        return cls(int(n), tuple(int(i) for i in support[order]),
                   tuple(float(v) for v in values[order]))

    @classmethod
    def from_dense(cls, x) -> "SparseSignal":
        x = np.asarray(x, dtype=float)
        idx = np.flatnonzero(x)
        return cls(x.size, tuple(int(i) for i in idx), tuple(float(v) for v in x[idx]))


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Independent stream for trial ``trial`` under master seed ``seed``."""
    return np.random.default_rng([int(seed), int(trial)])


def sample_signal(dims: ProblemDims, alphabet: Alphabet,
                  rng: np.random.Generator) -> SparseSignal:
    """Uniform random k-subset support with i.i.d. uniform values from the alphabet."""
    support = np.sort(rng.choice(dims.N, size=dims.k, replace=False))
    values = alphabet.array[rng.integers(0, alphabet.M, size=dims.k)]
    return SparseSignal(dims.N, tuple(int(i) for i in support),
                        tuple(float(v) for v in values))


def square_error(x: SparseSignal, xhat, k: int) -> float:
    """``||x - xhat||^2 / k``; ``xhat`` may be dense or a SparseSignal."""
    if isinstance(xhat, SparseSignal):
        xhat = xhat.dense()
    xhat = np.asarray(xhat, dtype=float)
    if xhat.shape != (x.n,):
        raise DimensionError(f"estimate has shape {xhat.shape}, expected ({x.n},)")
    diff = x.dense() - xhat
    return float(diff @ diff) / k
