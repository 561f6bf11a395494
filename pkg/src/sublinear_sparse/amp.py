"""Approximate message passing with damping for Gaussian compressed sensing.

Model: ``y = k^{-1/2} A x + w`` with ``A`` an ``M x N`` standard Gaussian
matrix.  With ``At = A / sqrt(k)`` and ``gamma = k / M`` the recursion is

    r^t     = y - At x^t + b_t r^{t-1}
    u^t     = x^t + gamma At^T r^t
    x^{t+1} = theta eta(u^t, v_t) + (1 - theta) x^t

where ``b_t = (N/M) <eta'(u^{t-1})>`` is the Onsager coefficient and
``v_t = gamma ||r^t||^2 / M`` estimates the per-coordinate noise variance of
``u^t``.  For ``t > 0`` the residual is damped with the same ``theta``.
"""

from __future__ import annotations

import dataclasses
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .channel import cs_measure
from .core import Alphabet, DimensionError, ProblemDims, sample_signal, trial_rng
from .estimators import (
    nonseparable_bayes_with_derivative,
    separable_bayes_with_derivative,
)

POLICIES = ("separable", "nonseparable", "switched")
DEFAULT_DAMPING_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))
# variance floor keeping the posterior logits finite at an exact fixed point
_V_FLOOR = 1e-300


class Denoiser(ABC):
    """Map from pseudo-data ``u`` with noise variance ``v`` to an estimate."""

    name: str = ""

    @abstractmethod
    def denoise_with_divergence(self, u, v: float) -> tuple[np.ndarray, float]:
        """Estimate and the mean of ``d eta_n / d u_n``."""

    def denoise(self, u, v: float) -> np.ndarray:
        return self.denoise_with_divergence(u, v)[0]

    def divergence(self, u, v: float) -> float:
        return self.denoise_with_divergence(u, v)[1]


@dataclass
class SeparableDenoiser(Denoiser):
    dims: ProblemDims
    alphabet: Alphabet
    name: str = "separable"

    def denoise_with_divergence(self, u, v):
        est, der = separable_bayes_with_derivative(u, self.dims, self.alphabet,
                                                   max(v, _V_FLOOR))
        return est, float(np.mean(der))


@dataclass
class NonseparableDenoiser(Denoiser):
    dims: ProblemDims
    alphabet: Alphabet
    name: str = "nonseparable"

    def denoise_with_divergence(self, u, v):
        est, der = nonseparable_bayes_with_derivative(u, self.dims, self.alphabet,
                                                      max(v, _V_FLOOR))
        return est, float(np.mean(der))


def finite_difference_divergence(den: Denoiser, u, v: float,
                                 rel_step: float = 1e-5) -> np.ndarray:
    """Central differences of ``eta_n`` in ``u_n``, one coordinate at a time."""
    u = np.asarray(u, dtype=float)
    out = np.empty(u.size)
    for n in range(u.size):
        h = rel_step * (1 + abs(u[n]))
        up, dn = u.copy(), u.copy()
        up[n] += h
        dn[n] -= h
        out[n] = (den.denoise(up, v)[n] - den.denoise(dn, v)[n]) / (2 * h)
    return out


def input_snr_db(v: float, alphabet: Alphabet, log_ratio: float = 1.0) -> float:
    """``10 log10(P_u / (v log_ratio))`` with ``P_u`` the mean squared amplitude.

    ``log_ratio = ln(N/k)`` converts the pseudo-data variance ``v`` to the
    base noise scale on which the estimator crossover is measured.
    """
    if v < 0:
        raise ValueError("noise variance must be non-negative")
    if v == 0:
        return math.inf
    return 10 * math.log10(alphabet.mean_power / (v * log_ratio))


@dataclass(frozen=True)
class AmpConfig:
    iterations: int = 30
    theta: float = 1.0
    policy: str = "switched"
    switch_db: float = 6.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.theta <= 1:
            raise ValueError(f"theta must lie in (0, 1], got {self.theta}")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")


@dataclass(frozen=True)
class AmpState:
    """One iteration.  ``x_hat`` is the damped estimate after the update.

    ``output_mse`` measures the raw denoiser output and ``est_mse`` the damped
    estimate; both are normalised by ``k``.  ``input_mse`` is ``||u - x||^2 / N``.
    """

    iteration: int
    x_hat: np.ndarray
    r: np.ndarray
    u: np.ndarray
    v: float
    b: float
    snr_db: float
    denoiser: str
    input_mse: float = math.nan
    output_mse: float = math.nan
    est_mse: float = math.nan


def estimate_input_snr(state: AmpState, alphabet: Alphabet,
                       log_ratio: float = 1.0) -> float:
    return input_snr_db(state.v, alphabet, log_ratio)


@dataclass
class AmpTrace:
    config: AmpConfig
    states: list[AmpState] = field(default_factory=list)
    diverged: bool = False
    message: str = ""

    def __len__(self) -> int:
        return len(self.states)

    @property
    def x_hat(self) -> np.ndarray:
        return self.states[-1].x_hat

    @property
    def final_mse(self) -> float:
        """Square error of the last damped estimate; ``nan`` without an oracle."""
        return self.states[-1].est_mse if self.states else math.nan


def _pick(config: AmpConfig, snr: float, sep: Denoiser, nonsep: Denoiser) -> Denoiser:
    if config.policy == "separable":
        return sep
    if config.policy == "nonseparable":
        return nonsep
    return nonsep if snr > config.switch_db else sep


def amp_run(y, A, config: AmpConfig, dims: ProblemDims, alphabet: Alphabet,
            x_true=None, x_init=None) -> AmpTrace:
    """Run damped AMP for ``config.iterations`` steps from ``x_init`` (default zero).

    Stops early and flags ``diverged`` if the state turns non-finite or the
    noise estimate exceeds ``1e3`` times its initial value.
    """
    y = np.asarray(y, dtype=float)
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape != (y.size, dims.N):
        raise DimensionError(f"matrix shape {A.shape} does not match (M, N) = ({y.size}, {dims.N})")
    m_meas = y.size
    if m_meas < 1:
        raise DimensionError("need at least one measurement")
    x = None if x_true is None else np.asarray(x_true, dtype=float)
    if x is not None and x.shape != (dims.N,):
        raise DimensionError(f"x_true has shape {x.shape}, expected ({dims.N},)")

    at = A / math.sqrt(dims.k)
    gamma = dims.k / m_meas
    onsager_scale = dims.N / m_meas
    theta = config.theta
    sep = SeparableDenoiser(dims, alphabet)
    nonsep = NonseparableDenoiser(dims, alphabet)

    trace = AmpTrace(config)
    x_hat = np.zeros(dims.N) if x_init is None else np.array(x_init, dtype=float)
    if x_hat.shape != (dims.N,):
        raise DimensionError(f"x_init has shape {x_hat.shape}, expected ({dims.N},)")
    r_prev = None
    b = 0.0
    v0 = None
    for t in range(config.iterations):
        r = y - at @ x_hat
        if r_prev is not None:
            r = theta * (r + b * r_prev) + (1 - theta) * r_prev
        v = gamma * float(r @ r) / m_meas
        if v0 is None:
            v0 = v
        if not math.isfinite(v) or v > 1e3 * max(v0, _V_FLOOR):
            trace.diverged = True
            trace.message = f"noise estimate {v:.3g} at iteration {t} (initial {v0:.3g})"
            break
        u = x_hat + gamma * (at.T @ r)
        snr = input_snr_db(v, alphabet, dims.log_ratio)
        den = _pick(config, snr, sep, nonsep)
        cand, div = den.denoise_with_divergence(u, v)
        if not np.all(np.isfinite(cand)) or not math.isfinite(div):
            trace.diverged = True
            trace.message = f"non-finite denoiser output at iteration {t}"
            break
        x_hat = theta * cand + (1 - theta) * x_hat
        kw = {}
        if x is not None:
            kw = dict(input_mse=float(np.sum((u - x) ** 2)) / dims.N,
                      output_mse=float(np.sum((cand - x) ** 2)) / dims.k,
                      est_mse=float(np.sum((x_hat - x) ** 2)) / dims.k)
        trace.states.append(AmpState(t, x_hat, r, u, v, b, snr, den.name, **kw))
        b = onsager_scale * div
        r_prev = r
    return trace


# ---------------------------------------------------------------------------
# problem generation and damping search


@dataclass(frozen=True)
class CsProblem:
    y: np.ndarray
    A: np.ndarray
    x: np.ndarray
    dims: ProblemDims
    alphabet: Alphabet


def cs_problem_generator(dims: ProblemDims, alphabet: Alphabet, m_meas: int,
                         sigma_sq: float) -> Callable[[np.random.Generator], CsProblem]:
    """Factory drawing a fresh signal, matrix and noise from the given stream."""
    if m_meas < 1:
        raise DimensionError("need at least one measurement")

    def make(rng: np.random.Generator) -> CsProblem:
        sig = sample_signal(dims, alphabet, rng)
        A = rng.standard_normal((m_meas, dims.N))
        y = cs_measure(sig, A, sigma_sq, rng)
        return CsProblem(y, A, sig.dense(), dims, alphabet)

    return make


def run_trials(make: Callable[[np.random.Generator], CsProblem], config: AmpConfig,
               trials: int, seed: int, offset: int = 0, mapper: Callable = None) -> np.ndarray:
    """Final square errors of independent runs.

    Trial ``t`` draws from stream ``(seed, offset + t)``.  ``mapper`` (default
    the builtin ``map``) may fan trials out to workers as long as it keeps
    the input order.
    """
    def one(t: int) -> float:
        p = make(trial_rng(seed, offset + t))
        trace = amp_run(p.y, p.A, config, p.dims, p.alphabet, x_true=p.x)
        return trace.final_mse if not trace.diverged else _diverged_mse(p, trace)

    mapper = mapper or (lambda fn, items: list(map(fn, items)))
    return np.array(mapper(one, range(trials)), dtype=float)


def _diverged_mse(p: CsProblem, trace: AmpTrace) -> float:
    # a run that blew up is scored by its last finite estimate, or the zero estimate
    xh = trace.x_hat if trace.states else np.zeros(p.dims.N)
    return float(np.sum((xh - p.x) ** 2)) / p.dims.k


def damping_search(make: Callable[[np.random.Generator], CsProblem],
                   grid: Sequence[float], trials: int, seed: int,
                   config: Optional[AmpConfig] = None, offset: int = 0,
                   mapper: Callable = None) -> tuple[float, np.ndarray]:
    """Exhaustive search for the common damping factor.

    Every ``theta`` sees the same ``trials`` problem instances.  Returns the
    minimiser of the mean final square error (first grid point on ties) and
    the per-``theta`` means.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("damping grid is empty")
    base = config or AmpConfig()
    means = np.array([
        run_trials(make, dataclasses.replace(base, theta=th), trials, seed, offset, mapper).mean()
        for th in grid
    ])
    return float(grid[int(np.argmin(means))]), means
