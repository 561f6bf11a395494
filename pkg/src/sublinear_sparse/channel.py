"""Forward models: scaled AWGN observation and Gaussian compressed sensing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import DimensionError, NoiseModel, ProblemDims, SparseSignal


def awgn_transmit(x: SparseSignal, noise: NoiseModel,
                  rng: np.random.Generator) -> np.ndarray:
    """Return ``y = x + w`` with ``w ~ N(0, sigma_eff_sq I)``."""
    y = x.dense()
    if noise.sigma_eff_sq > 0:
        y += math.sqrt(noise.sigma_eff_sq) * rng.standard_normal(x.n)
    return y


@dataclass
class SensingMatrix:
    """I.i.d. standard Gaussian ``rows x cols`` matrix.

    Row ``i`` is drawn from its own substream ``(seed, i)``, so any block of
    rows can be regenerated without materialising the full matrix.
    """

    rows: int
    cols: int
    seed: int
    _dense: Optional[np.ndarray] = field(default=None, repr=False)

    def block(self, start: int, stop: int) -> np.ndarray:
        if not 0 <= start <= stop <= self.rows:
            raise IndexError(f"row block [{start}, {stop}) out of range")
        out = np.empty((stop - start, self.cols))
        for i in range(start, stop):
            out[i - start] = np.random.default_rng([self.seed, i]).standard_normal(self.cols)
        return out

    def dense(self) -> np.ndarray:
        if self._dense is None:
            self._dense = self.block(0, self.rows)
        return self._dense

    @classmethod
    def from_array(cls, a) -> "SensingMatrix":
        a = np.asarray(a, dtype=float)
        if a.ndim != 2:
            raise DimensionError("sensing matrix must be 2-D")
        return cls(a.shape[0], a.shape[1], seed=-1, _dense=a)


@dataclass(frozen=True)
class CsDims:
    M_meas: int
    delta: float

    @classmethod
    def from_delta(cls, delta: float, dims: ProblemDims) -> "CsDims":
        if delta <= 0:
            raise ValueError("delta must be positive")
        m = max(1, int(round(delta * dims.k * dims.log_ratio)))
        return cls(m, delta)

    @classmethod
    def from_measurements(cls, M_meas: int, dims: ProblemDims) -> "CsDims":
        return cls(int(M_meas), delta_of(M_meas, dims))


def delta_of(M_meas: int, dims: ProblemDims) -> float:
    """Measurement budget ``M / (k ln(N/k))``."""
    if dims.N <= dims.k:
        raise DimensionError("delta needs N > k")
    return M_meas / (dims.k * dims.log_ratio)


def cs_measure(x: SparseSignal, A, sigma_sq: float,
               rng: np.random.Generator) -> np.ndarray:
    """Return ``y = k^{-1/2} A x + w`` with ``w ~ N(0, sigma_sq I_M)``."""
    a = A.dense() if isinstance(A, SensingMatrix) else np.asarray(A, dtype=float)
    if a.shape[1] != x.n:
        raise DimensionError(f"matrix has {a.shape[1]} columns, signal has length {x.n}")
    support = list(x.support)
    y = a[:, support] @ np.asarray(x.values) / math.sqrt(x.k)
    if sigma_sq > 0:
        y = y + math.sqrt(sigma_sq) * rng.standard_normal(a.shape[0])
    return y
