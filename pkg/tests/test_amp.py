import math

import numpy as np
import pytest
from scipy.stats import kurtosis

from sublinear_sparse.amp import (
    DEFAULT_DAMPING_GRID,
    AmpConfig,
    NonseparableDenoiser,
    SeparableDenoiser,
    amp_run,
    cs_problem_generator,
    damping_search,
    estimate_input_snr,
    finite_difference_divergence,
    input_snr_db,
)
from sublinear_sparse.channel import CsDims
from sublinear_sparse.core import Alphabet, DimensionError, ProblemDims, sample_signal, trial_rng

ONE = Alphabet([1])
DIMS = ProblemDims(4096, 8)


def problem(delta, sigma_sq=0.0, seed=0, dims=DIMS, alphabet=ONE):
    m = CsDims.from_delta(delta, dims).M_meas
    return cs_problem_generator(dims, alphabet, m, sigma_sq)(trial_rng(seed, 0))


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(iterations=0), dict(theta=0.0), dict(theta=1.5),
                                    dict(policy="ml")])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            AmpConfig(**kw)

    def test_default_grid(self):
        assert DEFAULT_DAMPING_GRID == (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


class TestInputSnr:
    @pytest.mark.parametrize("v,expected", [(0.1, 10.0), (1.0, 0.0), (0.25119, 6.0)])
    def test_examples(self, v, expected):
        assert input_snr_db(v, ONE) == pytest.approx(expected, abs=1e-4)

    def test_zero_variance(self):
        assert input_snr_db(0.0, ONE) == math.inf

    def test_log_ratio_scale(self):
        assert input_snr_db(0.1, ONE, log_ratio=10.0) == pytest.approx(0.0)

    def test_from_state(self):
        p = problem(4.0, 1e-4)
        trace = amp_run(p.y, p.A, AmpConfig(iterations=2), DIMS, ONE, x_true=p.x)
        s = trace.states[1]
        assert estimate_input_snr(s, ONE, DIMS.log_ratio) == pytest.approx(s.snr_db)


class TestDenoisers:
    @pytest.mark.parametrize("cls", [SeparableDenoiser, NonseparableDenoiser])
    @pytest.mark.parametrize("alphabet", [ONE, Alphabet([1, -1]), Alphabet([0.5, 2])])
    def test_divergence_matches_finite_differences(self, cls, alphabet, rng):
        dims = ProblemDims(40, 3)
        den = cls(dims, alphabet)
        for v in (0.05, 0.3, 1.0):
            u = sample_signal(dims, alphabet, rng).dense() + math.sqrt(v) * rng.standard_normal(40)
            fd = finite_difference_divergence(den, u, v).mean()
            assert den.divergence(u, v) == pytest.approx(fd, rel=1e-5)

    def test_denoise_agrees_with_pair(self, rng):
        den = NonseparableDenoiser(ProblemDims(30, 2), ONE)
        u = rng.standard_normal(30)
        np.testing.assert_array_equal(den.denoise(u, 0.2), den.denoise_with_divergence(u, 0.2)[0])


class TestAmpRun:
    def test_shape_checks(self):
        p = problem(1.0)
        with pytest.raises(DimensionError):
            amp_run(p.y, p.A[:, :-1], AmpConfig(), DIMS, ONE)
        with pytest.raises(DimensionError):
            amp_run(p.y, p.A, AmpConfig(), DIMS, ONE, x_true=np.zeros(3))

    def test_single_iteration_ignores_damping_in_state(self):
        p = problem(2.0, 1e-3)
        a = amp_run(p.y, p.A, AmpConfig(1, 1.0), DIMS, ONE, x_true=p.x).states[0]
        b = amp_run(p.y, p.A, AmpConfig(1, 0.4), DIMS, ONE, x_true=p.x).states[0]
        np.testing.assert_array_equal(a.r, b.r)
        np.testing.assert_array_equal(a.u, b.u)
        assert a.output_mse == b.output_mse
        np.testing.assert_allclose(b.x_hat, 0.4 * a.x_hat)

    def test_undamped_recursion_by_hand(self):
        dims = ProblemDims(200, 4)
        p = problem(3.0, 1e-3, dims=dims)
        trace = amp_run(p.y, p.A, AmpConfig(3, 1.0, "separable"), dims, ONE, x_true=p.x)
        at = p.A / 2.0
        m = p.y.size
        den = SeparableDenoiser(dims, ONE)
        x, r_prev, b = np.zeros(200), None, 0.0
        for s in trace.states:
            r = p.y - at @ x + (b * r_prev if r_prev is not None else 0.0)
            v = dims.k / m * (r @ r) / m
            u = x + dims.k / m * (at.T @ r)
            x, div = den.denoise_with_divergence(u, v)
            np.testing.assert_allclose(s.r, r, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(s.x_hat, x, rtol=1e-12, atol=1e-14)
            assert s.b == pytest.approx(b)
            b, r_prev = 200 / m * div, r

    def test_noiseless_fixed_point(self):
        p = problem(2.0)
        trace = amp_run(p.y, p.A, AmpConfig(3, 0.5), DIMS, ONE, x_true=p.x, x_init=p.x)
        s = trace.states[0]
        np.testing.assert_allclose(s.r, 0.0, atol=1e-12)
        for s in trace.states:
            np.testing.assert_allclose(s.x_hat, p.x, atol=1e-12)

    def test_recovery_above_threshold(self):
        p = problem(4.0)
        trace = amp_run(p.y, p.A, AmpConfig(30, 1.0, "switched"), DIMS, ONE, x_true=p.x)
        assert not trace.diverged
        assert trace.final_mse < 1e-3

    def test_failure_below_threshold(self):
        errs = []
        for seed in range(5):
            p = problem(0.25, seed=seed)
            errs.append(amp_run(p.y, p.A, AmpConfig(30, 1.0, "switched"), DIMS, ONE,
                                x_true=p.x).final_mse)
        assert np.mean(errs) > 0.5

    def test_trace_invariants(self):
        p = problem(1.5, 1e-4)
        trace = amp_run(p.y, p.A, AmpConfig(12, 0.7), DIMS, ONE, x_true=p.x)
        assert len(trace) <= 12
        assert all(s.v >= 0 for s in trace.states)

    def test_divergence_abort(self):
        p = problem(1.0)
        y = p.y.copy()
        y[0] = np.nan
        trace = amp_run(y, p.A, AmpConfig(5), DIMS, ONE)
        assert trace.diverged and "iteration 0" in trace.message and len(trace) == 0

    def test_switched_policy_uses_nonseparable_above_threshold(self):
        p = problem(2.0, 1e-3)
        trace = amp_run(p.y, p.A, AmpConfig(10, 1.0, "switched"), DIMS, ONE, x_true=p.x)
        sep, nonsep = SeparableDenoiser(DIMS, ONE), NonseparableDenoiser(DIMS, ONE)
        names = {s.denoiser for s in trace.states}
        assert names == {"separable", "nonseparable"}
        for s in trace.states:
            den = nonsep if s.snr_db > 6.0 else sep
            assert s.denoiser == den.name
            np.testing.assert_array_equal(s.x_hat, den.denoise(s.u, s.v))

    def test_pseudo_data_errors_look_gaussian_early(self):
        p = problem(4.0, 1e-4)
        trace = amp_run(p.y, p.A, AmpConfig(3, 1.0), DIMS, ONE, x_true=p.x)
        zero = p.x == 0
        for s in trace.states[:2]:
            assert abs(kurtosis((s.u - p.x)[zero], fisher=False) - 3) < 0.5

    def test_input_mse_tracks_noise_estimate(self):
        p = problem(3.0, 1e-4)
        trace = amp_run(p.y, p.A, AmpConfig(4, 1.0), DIMS, ONE, x_true=p.x)
        s = trace.states[0]
        assert s.input_mse == pytest.approx(s.v, rel=0.1)


class TestDampingSearch:
    def make(self, delta, sigma_sq=1e-4, dims=ProblemDims(1024, 4)):
        return cs_problem_generator(dims, ONE, CsDims.from_delta(delta, dims).M_meas, sigma_sq)

    def test_singleton(self):
        best, means = damping_search(self.make(2.0), [0.7], 3, seed=1)
        assert best == 0.7 and means.shape == (1,)

    def test_argmin_and_determinism(self):
        grid = [0.2, 0.5, 1.0]
        best, means = damping_search(self.make(1.5), grid, 4, seed=2,
                                     config=AmpConfig(iterations=15))
        assert means[grid.index(best)] == means.min()
        again = damping_search(self.make(1.5), grid, 4, seed=2, config=AmpConfig(iterations=15))
        assert again[0] == best
        np.testing.assert_array_equal(again[1], means)

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            damping_search(self.make(2.0), [], 3, seed=1)

    @pytest.mark.xfail(reason="undamped AMP already converges at delta=2.5 in this "
                              "reconstruction; see the decisions ledger", strict=False)
    def test_damping_helps_near_threshold(self):
        make = cs_problem_generator(DIMS, ONE, CsDims.from_delta(2.5, DIMS).M_meas, 1e-4)
        best, _ = damping_search(make, DEFAULT_DAMPING_GRID, 10, seed=0)
        assert best < 1.0
