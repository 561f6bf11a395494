"""Experiment drivers behind the command-line interface.

Every driver is deterministic given its spec: trial ``t`` draws from the
stream ``(seed, t)``, results land in pre-assigned slots, and reductions run
in trial order, so the worker count never changes the output.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import __version__
from .amp import (
    DEFAULT_DAMPING_GRID,
    AmpConfig,
    NonseparableDenoiser,
    SeparableDenoiser,
    amp_run,
    cs_problem_generator,
    damping_search,
    finite_difference_divergence,
    run_trials,
)
from .bounds import (
    MseBoundParams,
    converse_constants,
    error_prob_bound_total,
    gaussian_bilinear_mgf,
    matching_coefficients,
    mse_lower_bound,
    reliability_function,
    reliability_oracle,
    thresholds,
    truncation_level,
)
from .channel import CsDims, awgn_transmit
from .core import Alphabet, NoiseModel, ProblemDims, sample_signal, trial_rng
from .estimators import (
    EnumerationError,
    brute_force_ml,
    enumeration_size,
    exact_posterior_mean,
    inject_fault,
    ml_estimate,
    nonseparable_bayes,
    nonseparable_bayes_naive,
    residual,
    separable_bayes,
)

KINDS = ("snr-sweep", "delta-sweep", "transfer", "bounds", "verify")
SNR_ESTIMATORS = ("ml", "separable", "nonseparable", "exact")
AMP_POLICIES = ("separable", "nonseparable", "switched")
EXACT_LIMIT = 10 ** 6
# tuning trials for the damping search use indices disjoint from evaluation trials
TUNING_OFFSET = 1 << 40

MAIN_HEADER = "coordinate,estimator,N,k,trials,mse_mean,mse_stderr,seed"
TRANSFER_HEADER = "run,iteration,input_mse,output_mse"
BOUNDS_HEADER = "section,key,value"


@dataclass(frozen=True)
class SweepSpec:
    kind: str
    N: int
    k: int
    alphabet: str = "1"
    estimators: tuple[str, ...] = ()
    grid: tuple[float, ...] = ()
    snr_db: float = 40.0
    trials: int = 100
    seed: int = 0
    iterations: int = 30
    damping: str = "search"
    switch_db: float = 6.0
    tune_trials: int = 20
    threads: int = 1
    out: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.kind != "verify" and not self.grid:
            raise ValueError("grid must be non-empty")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        ProblemDims(self.N, self.k)
        Alphabet.parse(self.alphabet)
        if self.damping != "search":
            AmpConfig(theta=float(self.damping))

    @property
    def dims(self) -> ProblemDims:
        return ProblemDims(self.N, self.k)

    @property
    def alphabet_obj(self) -> Alphabet:
        return Alphabet.parse(self.alphabet)

    def hash(self) -> str:
        """Digest of every field that can change the results."""
        d = dataclasses.asdict(self)
        d.pop("threads")
        d.pop("out")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def manifest(self) -> str:
        return f"# version={__version__},seed={self.seed},spec_hash={self.hash()}"


@dataclass(frozen=True)
class SweepRow:
    coordinate: float
    estimator: str
    N: int
    k: int
    trials: int
    mse_mean: float
    mse_stderr: float
    seed: int

    def csv(self) -> str:
        return ",".join([_fmt(self.coordinate), self.estimator, str(self.N), str(self.k),
                         str(self.trials), _fmt(self.mse_mean), _fmt(self.mse_stderr),
                         str(self.seed)])


def _fmt(x: float) -> str:
    return repr(float(x))


def parse_grid(text: str) -> tuple[float, ...]:
    """Comma list (``"0,3,6"``) or inclusive range ``start:stop:step``."""
    text = text.strip()
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise ValueError(f"range must be start:stop:step with step > 0, got {text!r}")
        start, stop, step = parts
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        if n < 1:
            raise ValueError(f"empty range {text!r}")
        return tuple(round(start + i * step, 12) for i in range(n))
    vals = tuple(float(t) for t in text.split(",") if t.strip())
    if not vals:
        raise ValueError("empty grid")
    return vals


def snr_to_sigma_sq(snr_db: float) -> float:
    """Noise variance for ``1/sigma^2`` given in dB."""
    return 10 ** (-snr_db / 10)


def _mapper(threads: int) -> Callable:
    if threads == 1:
        return lambda fn, items: list(map(fn, items))

    def pmap(fn, items):
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))

    return pmap


def _stats(errs: np.ndarray) -> tuple[float, float]:
    se = float(errs.std(ddof=1) / math.sqrt(errs.size)) if errs.size > 1 else 0.0
    return float(errs.mean()), se


# ---------------------------------------------------------------------------
# estimator comparison on the scaled AWGN channel


def _snr_estimators(names: Iterable[str], dims: ProblemDims, alphabet: Alphabet):
    table = {
        "ml": lambda y, s: ml_estimate(y, dims, alphabet).dense(),
        "separable": lambda y, s: separable_bayes(y, dims, alphabet, s),
        "nonseparable": lambda y, s: nonseparable_bayes(y, dims, alphabet, s),
        "exact": lambda y, s: exact_posterior_mean(y, dims, alphabet, s, limit=EXACT_LIMIT),
    }
    out = {}
    for name in names:
        if name not in table:
            raise ValueError(f"unknown estimator {name!r}; choose from {SNR_ESTIMATORS}")
        out[name] = table[name]
    if "exact" in out and enumeration_size(dims.N, dims.k, alphabet.M) > EXACT_LIMIT:
        raise EnumerationError(f"exact posterior mean infeasible at N={dims.N}, k={dims.k}")
    return out


def snr_trial_errors(dims: ProblemDims, alphabet: Alphabet, sigma_sq: float,
                     estimators: Sequence[str], trials: int, seed: int,
                     threads: int = 1) -> dict[str, np.ndarray]:
    """Per-trial square errors; all estimators see the same draws."""
    fns = _snr_estimators(estimators, dims, alphabet)
    noise = NoiseModel.from_dims(sigma_sq, dims)

    def one(t: int) -> list[float]:
        rng = trial_rng(seed, t)
        x = sample_signal(dims, alphabet, rng)
        y = awgn_transmit(x, noise, rng)
        xd = x.dense()
        return [float(np.sum((f(y, noise.sigma_eff_sq) - xd) ** 2)) / dims.k
                for f in fns.values()]

    res = np.array(_mapper(threads)(one, range(trials)))
    return {name: res[:, j] for j, name in enumerate(fns)}


def sweep_snr(spec: SweepSpec) -> list[SweepRow]:
    dims, alphabet = spec.dims, spec.alphabet_obj
    ests = spec.estimators or ("ml", "separable", "nonseparable")
    rows = []
    for snr in spec.grid:
        errs = snr_trial_errors(dims, alphabet, snr_to_sigma_sq(snr), ests,
                                spec.trials, spec.seed, spec.threads)
        for name, e in errs.items():
            rows.append(SweepRow(snr, name, dims.N, dims.k, spec.trials, *_stats(e), spec.seed))
    rows.sort(key=lambda r: (r.estimator, r.coordinate))
    return rows


# ---------------------------------------------------------------------------
# AMP experiments


def _policies(spec: SweepSpec) -> tuple[str, ...]:
    pols = spec.estimators or ("separable", "switched")
    for p in pols:
        if p not in AMP_POLICIES:
            raise ValueError(f"unknown AMP policy {p!r}; choose from {AMP_POLICIES}")
    return pols


def _tuned_theta(spec: SweepSpec, make, policy: str) -> float:
    if spec.damping != "search":
        return float(spec.damping)
    cfg = AmpConfig(spec.iterations, 1.0, policy, spec.switch_db)
    best, _ = damping_search(make, DEFAULT_DAMPING_GRID, spec.tune_trials, spec.seed,
                             cfg, offset=TUNING_OFFSET, mapper=_mapper(spec.threads))
    return best


@dataclass(frozen=True)
class DeltaResult:
    rows: list[SweepRow]
    thetas: dict[tuple[float, str], float]


def sweep_delta(spec: SweepSpec) -> DeltaResult:
    dims, alphabet = spec.dims, spec.alphabet_obj
    sigma_sq = snr_to_sigma_sq(spec.snr_db)
    rows, thetas = [], {}
    for delta in spec.grid:
        m = CsDims.from_delta(delta, dims).M_meas
        make = cs_problem_generator(dims, alphabet, m, sigma_sq)
        for pol in _policies(spec):
            theta = _tuned_theta(spec, make, pol)
            thetas[(delta, pol)] = theta
            cfg = AmpConfig(spec.iterations, theta, pol, spec.switch_db)
            errs = run_trials(make, cfg, spec.trials, spec.seed, mapper=_mapper(spec.threads))
            rows.append(SweepRow(delta, pol, dims.N, dims.k, spec.trials, *_stats(errs), spec.seed))
    rows.sort(key=lambda r: (r.estimator, r.coordinate))
    return DeltaResult(rows, thetas)


@dataclass(frozen=True)
class TransferRow:
    run: str
    iteration: int
    input_mse: float
    output_mse: float

    def csv(self) -> str:
        return f"{self.run},{self.iteration},{_fmt(self.input_mse)},{_fmt(self.output_mse)}"


TRANSFER_VARIANCES = tuple(float(v) for v in np.logspace(-4, 0, 17))


def denoiser_transfer(spec: SweepSpec,
                      variances: Sequence[float] = TRANSFER_VARIANCES) -> list[TransferRow]:
    """Standalone denoiser curves followed by AMP trajectories.

    Curves: ``u = x + N(0, v)`` over the variance grid, averaged over trials,
    with run names ``<denoiser>-curve`` and ``iteration`` the grid index.
    Trajectories: run ``amp-<policy>-<trial>`` at the first grid ``delta``.
    """
    dims, alphabet = spec.dims, spec.alphabet_obj
    dens = {"separable": SeparableDenoiser(dims, alphabet),
            "nonseparable": NonseparableDenoiser(dims, alphabet)}
    mapper = _mapper(spec.threads)
    rows = []
    for name, den in dens.items():
        for i, v in enumerate(variances):
            def one(t: int, v=v, den=den) -> tuple[float, float]:
                rng = trial_rng(spec.seed, t)
                x = sample_signal(dims, alphabet, rng).dense()
                u = x + math.sqrt(v) * rng.standard_normal(dims.N)
                est = den.denoise(u, v)
                return (float(np.sum((u - x) ** 2)) / dims.N,
                        float(np.sum((est - x) ** 2)) / dims.k)

            res = np.array(mapper(one, range(spec.trials)))
            rows.append(TransferRow(f"{name}-curve", i, float(res[:, 0].mean()),
                                    float(res[:, 1].mean())))

    delta = spec.grid[0]
    m = CsDims.from_delta(delta, dims).M_meas
    make = cs_problem_generator(dims, alphabet, m, snr_to_sigma_sq(spec.snr_db))
    for pol in _policies(spec):
        theta = _tuned_theta(spec, make, pol)
        cfg = AmpConfig(spec.iterations, theta, pol, spec.switch_db)

        def traj(t: int, cfg=cfg):
            p = make(trial_rng(spec.seed, t))
            return amp_run(p.y, p.A, cfg, dims, alphabet, x_true=p.x).states

        for t, states in enumerate(mapper(traj, range(spec.trials))):
            rows.extend(TransferRow(f"amp-{pol}-{t}", s.iteration, s.input_mse, s.output_mse)
                        for s in states)
    return rows


# ---------------------------------------------------------------------------
# bounds calculator


@dataclass(frozen=True)
class BoundsRow:
    section: str
    key: str
    value: float

    def csv(self) -> str:
        return f"{self.section},{self.key},{_fmt(self.value)}"


def bounds_report(spec: SweepSpec, max_w: int = 3, oracle: bool = True) -> list[BoundsRow]:
    """Tabulate thresholds and bounds; ``spec.grid`` holds ``1/sigma^2`` in dB."""
    dims, alphabet = spec.dims, spec.alphabet_obj
    rows = []
    ach, conv = thresholds(alphabet)
    rows += [BoundsRow("threshold", "achievability", ach), BoundsRow("threshold", "converse", conv)]
    rows.append(BoundsRow("truncation", f"N={dims.N};k={dims.k}", truncation_level(dims)))
    alpha = 1 / (4 * alphabet.u_max ** 2)
    for snr in spec.grid:
        s2 = snr_to_sigma_sq(snr)
        tag = f"sigma_sq={s2!r}"
        for w in range(1, min(dims.k, max_w) + 1):
            wps = range(min(dims.k - w, max_w) + 1) if alphabet.M > 1 else [0]
            for wp in wps:
                key = f"w={w};w_prime={wp};{tag}"
                rows.append(BoundsRow("reliability", key, reliability_function(w, wp, s2, alphabet)))
                if oracle:
                    rows.append(BoundsRow("reliability_oracle", key,
                                          reliability_oracle(w, wp, s2, alphabet)))
        rows.append(BoundsRow("error_bound", f"N={dims.N};k={dims.k};{tag}",
                              error_prob_bound_total(dims, alphabet, s2)))
        cc = converse_constants(s2, alphabet)
        rows += [BoundsRow("converse", f"C0;{tag}", cc.C0),
                 BoundsRow("converse", f"C1;{tag}", cc.C1),
                 BoundsRow("converse", f"gamma_max;{tag}", cc.gamma_max)]
    rows.append(BoundsRow("mse_lower_bound", f"N={dims.N};k={dims.k};alpha={alpha!r};J=0",
                          mse_lower_bound(MseBoundParams(alpha, alphabet.u_max,
                                                         alphabet.mean_power), dims)))
    return rows


# ---------------------------------------------------------------------------
# oracle verification suites


@dataclass(frozen=True)
class SuiteResult:
    name: str
    instances: int
    minimum: int
    failures: int
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.failures == 0 and self.instances >= self.minimum


def verify_ml(instances: int = 1000, seed: int = 0) -> SuiteResult:
    """Order-statistics ML against exhaustive search on small problems."""
    rng = np.random.default_rng([seed, 1])
    alphabets = [Alphabet([1]), Alphabet([1, -1]), Alphabet([1, 2])]
    fails, worst = 0, ""
    for _ in range(instances):
        k = int(rng.integers(1, 4))
        N = int(rng.integers(2 * k, 13))
        alphabet = alphabets[int(rng.integers(len(alphabets)))]
        s2 = float(rng.choice([0.05, 0.5, 2.0]))
        dims = ProblemDims(N, k)
        x = sample_signal(dims, alphabet, rng)
        y = awgn_transmit(x, NoiseModel.from_dims(s2, dims), rng)
        fast = residual(y, ml_estimate(y, dims, alphabet).dense())
        slow = residual(y, brute_force_ml(y, dims, alphabet).dense())
        if fast != slow:
            fails += 1
            worst = f"N={N} k={k} U={alphabet}: {fast!r} vs {slow!r}"
    return SuiteResult("ml-vs-brute-force", instances, 1000, fails, worst)


def verify_nonseparable(instances: int = 200, seed: int = 0, tol: float = 1e-10) -> SuiteResult:
    rng = np.random.default_rng([seed, 2])
    alphabets = [Alphabet([1]), Alphabet([1, -1]), Alphabet([0.5, 2])]
    fails, worst = 0, 0.0
    for _ in range(instances):
        k = int(rng.integers(1, 5))
        N = int(rng.integers(2 * k + 1, 2 * k + 12))
        alphabet = alphabets[int(rng.integers(len(alphabets)))]
        dims = ProblemDims(N, k)
        s2 = float(rng.uniform(0.05, 2.0))
        y = sample_signal(dims, alphabet, rng).dense() + math.sqrt(s2) * rng.standard_normal(N)
        err = float(np.max(np.abs(nonseparable_bayes(y, dims, alphabet, s2)
                                  - nonseparable_bayes_naive(y, dims, alphabet, s2))))
        worst = max(worst, err)
        fails += int(err > tol)
    return SuiteResult("nonseparable-vs-naive", instances, 200, fails, f"max abs diff {worst:.3g}")


def verify_divergence(instances: int = 40, seed: int = 0, rtol: float = 1e-5) -> SuiteResult:
    """Analytic divergence against central differences of the denoisers."""
    rng = np.random.default_rng([seed, 3])
    fails, worst = 0, 0.0
    for i in range(instances):
        k = int(rng.integers(1, 5))
        N = int(rng.integers(2 * k + 1, 40))
        alphabet = [Alphabet([1]), Alphabet([1, -1])][i % 2]
        dims = ProblemDims(N, k)
        v = float(rng.uniform(0.05, 1.0))
        u = sample_signal(dims, alphabet, rng).dense() + math.sqrt(v) * rng.standard_normal(N)
        for den in (SeparableDenoiser(dims, alphabet), NonseparableDenoiser(dims, alphabet)):
            fd = float(np.mean(finite_difference_divergence(den, u, v)))
            an = den.divergence(u, v)
            err = abs(an - fd) / max(abs(fd), 1e-12)
            worst = max(worst, err)
            fails += int(err > rtol)
    return SuiteResult("divergence-vs-finite-differences", 2 * instances, 40, fails,
                       f"max rel diff {worst:.3g}")


def lemma_sum(f0: np.ndarray, fu: np.ndarray, w: int) -> float:
    """``sum over w-sparse x in U^k`` of ``prod_i f_i(x_i)`` by enumeration.

    ``f0[i] = f_i(0)`` and ``fu[i, m] = f_i(u_m)``.
    """
    k, M = fu.shape
    total = 0.0
    for support in itertools.combinations(range(k), w):
        off = np.prod(np.delete(f0, support))
        for vals in itertools.product(range(M), repeat=w):
            total += off * np.prod(fu[list(support), list(vals)])
    return total


def random_lemma_weights(k: int, M: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Non-negative weights with ``f_i(0) <= sum_m f_i(u_m)``."""
    fu = rng.exponential(size=(k, M))
    # a quarter of the coordinates sit exactly on the constraint boundary
    scale = np.where(rng.uniform(size=k) < 0.25, 1.0, rng.uniform(size=k))
    f0 = fu.sum(axis=1) * scale
    return f0, fu


def verify_lemma7(assignments: int = 100, seed: int = 0, max_k: int = 6) -> SuiteResult:
    rng = np.random.default_rng([seed, 4])
    fails, checks, detail = 0, 0, ""
    for a in range(assignments):
        k = int(rng.integers(2, max_k + 1))
        M = 1 + a % 2
        f0, fu = random_lemma_weights(k, M, rng)
        sums = [lemma_sum(f0, fu, w) for w in range(k + 1)]
        for w in range(k + 1):
            for wp in range(w + 1, k + 1):
                checks += 1
                ceil_l = matching_coefficients(w, wp, k)[1]
                if sums[w] > ceil_l * sums[wp] * (1 + 1e-12):
                    fails += 1
                    detail = f"k={k} w={w} w'={wp}"
    return SuiteResult("lemma7-enumeration", assignments, 100, fails,
                       f"{checks} inequalities checked" + (f"; last failure {detail}" if detail else ""))


def random_mgf_input(d: int, rng: np.random.Generator) -> tuple[float, np.ndarray, np.ndarray]:
    """Draw ``(v, u1, u2)`` whose moment generating function and its square are finite."""
    while True:
        u1 = rng.normal(scale=0.2, size=d)
        u2 = rng.normal(scale=0.2, size=d)
        v = float(rng.uniform(-0.5, 0.5))
        ok = True
        for c in (1, 2):
            det = (1 - c * u2 @ u1) ** 2 - (2 * c * v + c * c * u2 @ u2) * (u1 @ u1)
            ok &= det > 0
        if ok:
            return v, u1, u2


def mgf_monte_carlo(v: float, u1: np.ndarray, u2: np.ndarray, samples: int,
                    rng: np.random.Generator, chunk: int = 200_000) -> tuple[float, float]:
    total, total_sq, done = 0.0, 0.0, 0
    while done < samples:
        m = min(chunk, samples - done)
        a = rng.standard_normal((m, u1.size))
        p = a @ u1
        vals = np.exp(p * (v * p + a @ u2))
        total += vals.sum()
        total_sq += (vals * vals).sum()
        done += m
    mean = total / samples
    var = max(total_sq / samples - mean * mean, 0.0) * samples / (samples - 1)
    return mean, math.sqrt(var / samples)


def verify_mgf(inputs: int = 20, samples: int = 10 ** 6, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng([seed, 5])
    fails, worst = 0, 0.0
    for i in range(inputs):
        v, u1, u2 = random_mgf_input(1 + i % 4, rng)
        exact = gaussian_bilinear_mgf(v, u1, u2)
        mean, se = mgf_monte_carlo(v, u1, u2, samples, rng)
        z = abs(mean - exact) / se
        worst = max(worst, z)
        fails += int(z > 3)
    return SuiteResult("prop4-monte-carlo", inputs, 20, fails, f"max |z| {worst:.2f}")


def verify(seed: int = 0, fault: Optional[str] = None, mgf_samples: int = 10 ** 6) -> list[SuiteResult]:
    """Run every oracle suite; ``fault`` enables a named negative control."""
    suites = [lambda: verify_ml(seed=seed), lambda: verify_nonseparable(seed=seed),
              lambda: verify_divergence(seed=seed), lambda: verify_lemma7(seed=seed),
              lambda: verify_mgf(samples=mgf_samples, seed=seed)]
    if fault is None:
        return [s() for s in suites]
    with inject_fault(fault):
        return [s() for s in suites]


# ---------------------------------------------------------------------------
# CSV rendering


def render_csv(spec: SweepSpec, header: str, rows: Iterable, extra: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    buf.write(spec.manifest() + "\n")
    for line in extra:
        buf.write(f"# {line}\n")
    buf.write(header + "\n")
    for r in rows:
        buf.write(r.csv() + "\n")
    return buf.getvalue()
