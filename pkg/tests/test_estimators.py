import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sublinear_sparse.core import Alphabet, DimensionError, ProblemDims, SparseSignal, sample_signal
from sublinear_sparse.estimators import (
    DenoiserContext,
    EnumerationError,
    _rank_windows,
    brute_force_ml,
    classify_error,
    ell_m,
    enumerate_signals,
    exact_posterior_mean,
    hard_decision,
    inject_fault,
    ml_estimate,
    nonseparable_bayes,
    nonseparable_bayes_naive,
    nonseparable_bayes_with_derivative,
    posterior_mean_leave_one_out,
    residual,
    separable_bayes,
    separable_bayes_with_derivative,
    xi_profile,
)

from .conftest import ALPHABETS

small_case = st.tuples(
    st.integers(1, 3).flatmap(lambda k: st.tuples(st.just(k), st.integers(2 * k, 10))),
    st.sampled_from(ALPHABETS),
    st.sampled_from([0.05, 0.5, 2.0]),
    st.integers(0, 2 ** 32 - 1),
)


def draw(case):
    (k, N), alphabet, s2, seed = case
    rng = np.random.default_rng(seed)
    dims = ProblemDims(N, k)
    x = sample_signal(dims, alphabet, rng)
    y = x.dense() + math.sqrt(s2) * rng.standard_normal(N)
    return dims, alphabet, s2, x, y


def naive_xi(y, k, alphabet):
    """Min residual over candidates with k0 non-zeros on the top-ranked entries."""
    order = np.argsort(-y, kind="stable")
    out = []
    for k0 in range(k + 1):
        sup = np.concatenate([order[:k0], order[y.size - (k - k0):]]).astype(int)
        best = math.inf
        for vals in itertools.product(alphabet.points, repeat=k):
            x = np.zeros(y.size)
            x[sup] = vals
            best = min(best, float(np.sum((y - x) ** 2)))
        out.append(best)
    return np.array(out)


class TestHardDecision:
    def test_examples(self):
        pm = Alphabet([1, -1])
        assert hard_decision(0.4, pm) == 1.0
        assert hard_decision(0.0, pm) == 1.0
        assert hard_decision(-1.0, pm) == -1.0
        assert hard_decision(2.0, Alphabet([1, 2])) == 2.0


class TestRankWindows:
    @given(st.lists(st.integers(-3, 3), min_size=2, max_size=40), st.integers(1, 6))
    def test_matches_stable_argsort(self, vals, width):
        y = np.asarray(vals, dtype=float)
        width = min(width, y.size)
        top, bot = _rank_windows(y, width)
        order = np.argsort(-y, kind="stable")
        np.testing.assert_array_equal(top, order[:width])
        np.testing.assert_array_equal(bot, order[y.size - width:])


class TestXiProfile:
    def test_worked_example(self):
        prof = xi_profile([3, 0.1, -2], 1, Alphabet([1]))
        np.testing.assert_allclose(prof.xi_values, [18.01, 8.01])
        assert prof.k_star == 1

    def test_all_zero_tie(self):
        prof = xi_profile(np.zeros(4), 1, Alphabet([1]))
        np.testing.assert_allclose(prof.xi_values, [1.0, 1.0])
        assert prof.k_star == 0

    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_noiseless_fit_is_exact(self, k, rng):
        dims = ProblemDims(12, k)
        x = sample_signal(dims, Alphabet([1]), rng)
        prof = xi_profile(x.dense(), k, Alphabet([1]))
        assert prof.xi_values[prof.k_star] == pytest.approx(0.0, abs=1e-12)

    @given(small_case)
    def test_against_naive_and_identity(self, case):
        dims, alphabet, _, _, y = draw(case)
        prof = xi_profile(y, dims.k, alphabet)
        np.testing.assert_allclose(prof.xi_values, naive_xi(y, dims.k, alphabet), atol=1e-10)
        assert prof.xi_values[prof.k_star] == prof.xi_values.min()
        top, bot = prof.boundary_terms
        for k0 in range(dims.k + 1):
            want = prof.total_sq + top[:k0].sum() + bot[k0:].sum()
            assert prof.xi_values[k0] == pytest.approx(want, abs=1e-10)

    def test_rejects_short_vector(self):
        with pytest.raises(DimensionError):
            xi_profile(np.zeros(3), 2, Alphabet([1]))


class TestMl:
    def test_worked_example(self):
        dims = ProblemDims(3, 1)
        for est in (ml_estimate, brute_force_ml):
            x = est(np.array([3, 0.1, -2]), dims, Alphabet([1]))
            assert x.support == (0,) and x.values == (1.0,)

    def test_noiseless_recovery(self, rng):
        dims, a = ProblemDims(30, 4), Alphabet([1, -1, 2])
        x = sample_signal(dims, a, rng)
        assert ml_estimate(x.dense(), dims, a) == x
        assert brute_force_ml(x.dense(), ProblemDims(30, 4), a, limit=10 ** 7) == x

    @given(small_case)
    def test_residual_equals_brute_force(self, case):
        dims, alphabet, _, _, y = draw(case)
        fast = ml_estimate(y, dims, alphabet)
        slow = brute_force_ml(y, dims, alphabet)
        assert residual(y, fast.dense()) == residual(y, slow.dense())
        assert residual(y, fast.dense()) == pytest.approx(
            xi_profile(y, dims.k, alphabet).xi_values.min(), abs=1e-10)

    def test_fault_hook_breaks_equivalence(self, rng):
        dims, a = ProblemDims(8, 2), Alphabet([1])
        y = sample_signal(dims, a, rng).dense() + 0.1 * rng.standard_normal(8)
        with inject_fault("flip-kstar"):
            bad = ml_estimate(y, dims, a)
        assert residual(y, bad.dense()) > residual(y, brute_force_ml(y, dims, a).dense())

    def test_enumeration_guard(self):
        with pytest.raises(EnumerationError):
            next(enumerate_signals(100, 10, Alphabet([1, -1])))

    def test_enumeration_count(self):
        blocks = list(enumerate_signals(5, 2, Alphabet([1, -1])))
        assert sum(b.shape[0] for b in blocks) == math.comb(5, 2) * 4


class TestClassifyError:
    def test_examples(self):
        x = SparseSignal(4, (1, 2), (1.0, 1.0))
        e = classify_error(x, x)
        assert (e.w, e.w_prime) == (0, 0)
        e = classify_error(x, SparseSignal(4, (1, 3), (1.0, 1.0)))
        assert (e.w, e.w_prime) == (1, 0)
        e = classify_error(x, SparseSignal(4, (1, 2), (-1.0, 1.0)))
        assert (e.w, e.w_prime) == (0, 1)


class TestSeparable:
    def test_worked_example(self):
        dims = ProblemDims(4, 1)
        out = separable_bayes(np.array([1.0, 0, 0, 0]), dims, Alphabet([1]), 1.0)
        pi = math.exp(0.5) / 3
        assert out[0] == pytest.approx(pi / (1 + pi), abs=1e-12)
        assert out[0] == pytest.approx(0.3547, abs=1e-4)

    def test_symmetry_and_limit(self):
        dims = ProblemDims(10, 2)
        assert separable_bayes(np.zeros(10), dims, Alphabet([1, -1]), 0.3)[0] == 0.0
        y = np.full(10, 1e3)
        np.testing.assert_allclose(separable_bayes(y, dims, Alphabet([1]), 0.3), 1.0)

    @given(st.floats(-4, 4), st.floats(0.05, 3), st.sampled_from(ALPHABETS))
    def test_derivative(self, y0, s2, a):
        dims = ProblemDims(10, 2)
        h = 1e-5 * (1 + abs(y0))
        f = lambda t: separable_bayes(np.array([t]), dims, a, s2)[0]
        fd = (f(y0 + h) - f(y0 - h)) / (2 * h)
        der = separable_bayes_with_derivative(np.array([y0]), dims, a, s2)[1][0]
        assert der == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestNonseparable:
    def test_worked_example(self):
        out = nonseparable_bayes(np.array([5.0, 0, 0]), ProblemDims(3, 1), Alphabet([1]), 0.01)
        np.testing.assert_allclose(out, [1, 0, 0], atol=1e-6)

    def test_zero_input(self):
        out = nonseparable_bayes(np.zeros(9), ProblemDims(9, 3), Alphabet([1, -1]), 0.2)
        np.testing.assert_array_equal(out, 0.0)

    @given(st.integers(1, 4).flatmap(lambda k: st.tuples(st.just(k), st.integers(2 * k + 1, 16))),
           st.sampled_from(ALPHABETS), st.floats(0.02, 2.0), st.integers(0, 2 ** 32 - 1))
    def test_matches_naive(self, kn, a, s2, seed):
        k, N = kn
        rng = np.random.default_rng(seed)
        dims = ProblemDims(N, k)
        y = sample_signal(dims, a, rng).dense() + math.sqrt(s2) * rng.standard_normal(N)
        np.testing.assert_allclose(nonseparable_bayes(y, dims, a, s2),
                                   nonseparable_bayes_naive(y, dims, a, s2), atol=1e-10)

    def test_ell_differences_across_values(self, rng):
        dims, a = ProblemDims(12, 3), Alphabet([1, -1, 2])
        rest = rng.standard_normal(11)
        ells = [ell_m(rest, m, dims, a) for m in range(3)]
        assert ells[0] - ells[2] == pytest.approx(1 - 4)
        assert ells[0] - ells[1] == pytest.approx(0.0)

    def test_far_element_leaves_minima_unchanged(self, rng):
        dims, a = ProblemDims(20, 2), Alphabet([1])
        y = rng.standard_normal(20)
        order = np.argsort(-y, kind="stable")
        mid = order[10]  # outside the top and bottom 2k ranks
        ctx = DenoiserContext(y, dims.k, a)
        other = order[9]
        assert ctx.gap[mid] == ctx.gap[other]
        assert ctx.ell()[mid, 0] == pytest.approx(ell_m(np.delete(y, mid), 0, dims, a))

    def test_own_derivative(self, rng):
        dims, a = ProblemDims(15, 3), Alphabet([1, -1])
        y = sample_signal(dims, a, rng).dense() + 0.5 * rng.standard_normal(15)
        est, der = nonseparable_bayes_with_derivative(y, dims, a, 0.3)
        for n in range(15):
            h = 1e-5 * (1 + abs(y[n]))
            up, dn = y.copy(), y.copy()
            up[n] += h
            dn[n] -= h
            fd = (nonseparable_bayes(up, dims, a, 0.3)[n] - nonseparable_bayes(dn, dims, a, 0.3)[n]) / (2 * h)
            assert der[n] == pytest.approx(fd, rel=1e-5, abs=1e-9)


class TestExactPosterior:
    @given(small_case)
    def test_two_routes_agree(self, case):
        dims, alphabet, s2, _, y = draw(case)
        if dims.N - 1 < dims.k:
            return
        np.testing.assert_allclose(exact_posterior_mean(y, dims, alphabet, s2),
                                   posterior_mean_leave_one_out(y, dims, alphabet, s2), atol=1e-12)

    def test_flat_likelihood_gives_prior_mean(self, rng):
        dims, a = ProblemDims(7, 2), Alphabet([1, 2])
        out = exact_posterior_mean(rng.standard_normal(7), dims, a, math.inf)
        np.testing.assert_allclose(out, 2 / 7 * 1.5)

    def test_low_noise_matches_nonseparable(self, rng):
        dims, a = ProblemDims(10, 2), Alphabet([1])
        s2 = 1e-4
        dev = []
        for _ in range(50):
            y = sample_signal(dims, a, rng).dense() + math.sqrt(s2) * rng.standard_normal(10)
            dev.append(np.mean(np.abs(exact_posterior_mean(y, dims, a, s2)
                                      - nonseparable_bayes(y, dims, a, s2))))
        assert np.mean(dev) < 1e-3

    def test_mean_is_posterior_weighted(self):
        # two coordinates, one non-zero: weights are exp(y_n / s2) up to a constant
        dims, a = ProblemDims(2, 1), Alphabet([1])
        y, s2 = np.array([0.3, -0.2]), 0.5
        w = np.exp(y / s2)
        np.testing.assert_allclose(exact_posterior_mean(y, dims, a, s2), w / w.sum())
