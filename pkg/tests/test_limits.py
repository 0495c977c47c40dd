import numpy as np
import pytest

from hmmdetect import limits as lim, model as md
from hmmdetect.model import Categorical, Gaussian, ModelSpec
from hmmdetect.posterior import ShapeMismatch

from conftest import random_model

F1 = Categorical([0.4, 0.3, 0.2, 0.1])
F2 = Categorical([0.1, 0.2, 0.3, 0.4])
F0 = Categorical([0.25, 0.25, 0.25, 0.25])


class TestKl:
    def test_gaussian_common_variance(self):
        assert np.isclose(lim.kl(Gaussian(0.7), Gaussian(0.2)), 0.125)

    def test_identical(self):
        assert lim.kl(F1, F1) == 0.0
        assert lim.kl(Gaussian(0.3, 2.0), Gaussian(0.3, 2.0)) == 0.0

    def test_categorical_four_term_sum(self):
        # independent oracle: direct four-term summation
        expect = sum(p * np.log(p / q) for p, q in zip(F1.probs, F2.probs))
        assert np.isclose(lim.kl(F1, F2), expect)
        assert np.isclose(lim.kl(F1, F2), 0.4564348191467835)

    def test_asymmetric_but_positive(self):
        assert lim.kl(F1, F0) != lim.kl(F0, F1)
        assert lim.kl(F1, F0) > 0

    def test_support_leak_is_infinite(self):
        assert lim.kl(Categorical([0.5, 0.5]), Categorical([1.0, 0.0])) == np.inf
        # 0 * log 0 convention on the other side
        assert np.isfinite(lim.kl(Categorical([1.0, 0.0]), Categorical([0.5, 0.5])))

    def test_unsupported_pair(self):
        with pytest.raises(lim.UnsupportedPair):
            lim.kl(F1, Gaussian(0.0))

    def test_general_gaussian(self):
        # quadrature oracle for unequal variances
        from scipy.integrate import quad

        a, b = Gaussian(0.3, 1.5), Gaussian(-0.2, 0.7)

        def integrand(x):
            fa = np.exp(a.log_pdf(x))
            return fa * (a.log_pdf(x) - b.log_pdf(x))

        expect, _ = quad(integrand, -20, 20)
        assert np.isclose(lim.kl(a, b), expect, atol=1e-9)


class TestVarrho:
    def test_geometric(self, categorical_parallel):
        expect = abs(np.log(0.95))
        assert np.isclose(lim.varrho(categorical_parallel, 1, "tail_estimate"), expect, atol=1e-8)
        assert np.isclose(lim.varrho(categorical_parallel, 1, "closed_form_geometric"), expect)
        assert np.isclose(lim.varrho(categorical_parallel, 2, "tail_estimate"), abs(np.log(0.85)), atol=1e-8)

    def test_mixture_of_geometrics(self, gaussian_blocks):
        # class 2's feeders exit at rates .2 and .05: the slower one wins
        expect = abs(np.log(1 - 0.05))
        assert np.isclose(lim.varrho(gaussian_blocks, 2, "tail_estimate"), expect, atol=1e-8)
        assert np.isclose(lim.varrho(gaussian_blocks, 2, "closed_form_geometric"), expect)

    def test_sum_of_geometrics(self, gaussian_blocks):
        expect = abs(np.log(1 - 0.1))
        assert np.isclose(lim.varrho(gaussian_blocks, 1, "tail_estimate"), expect, atol=1e-8)
        assert np.isclose(lim.varrho(gaussian_blocks, 1, "closed_form_geometric"), expect)

    def test_bounded_absorption_time_is_infinite(self):
        m = ModelSpec(states=["t", "1"], classes=[0, 1], eta=[1.0, 0.0],
                      trans=[[0.0, 1.0], [0.0, 1.0]],
                      densities=[Gaussian(0.0), Gaussian(1.0)])
        assert lim.varrho(m, 1, "tail_estimate") == np.inf
        assert lim.varrho(m, 1, "closed_form_geometric") == np.inf

    def test_oscillating_ratio_reports_no_convergence(self):
        # asymmetric 2-cycle: the one-step tail ratio alternates forever
        m = ModelSpec(states=["a", "b", "1"], classes=[0, 0, 1], eta=[1.0, 0.0, 0.0],
                      trans=[[0.0, 0.9, 0.1], [0.5, 0.0, 0.5], [0.0, 0.0, 1.0]],
                      densities=[Gaussian(0.0)] * 3)
        with pytest.raises(lim.NoConvergence):
            lim.varrho(m, 1, "tail_estimate")
        with pytest.raises(lim.LimitsError):
            lim.varrho(m, 1, "closed_form_geometric")


class TestExample1Limits:
    def test_parallel_case(self, categorical_parallel):
        t = lim.limits_example1(categorical_parallel)
        q10 = lim.kl(F1, F0)
        assert np.isclose(t.l[0, 0], q10 + abs(np.log(0.95)), atol=1e-8)
        assert np.isclose(t.l[0, 0], 0.157733, atol=5e-6)
        assert np.isclose(t.l[0, 2], 0.268959, atol=5e-6)
        assert t.jstar[0] == (0,)
        assert np.isclose(t.lstar[0], 0.157733, atol=5e-6)
        # class 2's minimum is attained at both alternatives (exact tie)
        assert t.jstar[1] == (0, 1)
        assert not t.unique_jstar[1]

    def test_min_branch_selection(self):
        # enormous pairwise KL forces the tail branch of the min
        m = ModelSpec(states=["t", "1", "2"], classes=[0, 1, 2], eta=[1.0, 0.0, 0.0],
                      trans=[[0.8, 0.1, 0.1], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                      densities=[Categorical([0.5, 0.5]),
                                 Categorical([1 - 1e-9, 1e-9]),
                                 Categorical([1e-9, 1 - 1e-9])])
        t = lim.limits_example1(m)
        q = t.q
        vr = t.varrho
        assert q[0, 2] > q[0, 0] + vr[1]
        assert np.isclose(t.l[0, 2], q[0, 0] + vr[1], atol=1e-10)
        assert 2 not in t.gamma[0]

    def test_symmetric_model(self):
        m = ModelSpec(states=["t", "1", "2"], classes=[0, 1, 2], eta=[1.0, 0.0, 0.0],
                      trans=[[0.8, 0.1, 0.1], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                      densities=[Categorical([0.5, 0.5]), Categorical([0.7, 0.3]),
                                 Categorical([0.3, 0.7])])
        t = lim.limits_example1(m)
        assert np.isclose(t.l[0, 2], t.l[1, 1], atol=1e-12)

    def test_gamma_membership_rule(self, categorical_parallel):
        t = lim.limits_example1(categorical_parallel)
        for i in (1, 2):
            for j in (1, 2):
                if i == j:
                    continue
                in_gamma = t.q[i - 1, j] < t.q[i - 1, 0] + t.varrho[j - 1]
                assert (j in t.gamma[i - 1]) == in_gamma

    def test_shape_mismatch(self, gaussian_blocks):
        with pytest.raises(ShapeMismatch):
            lim.limits_example1(gaussian_blocks)

    def test_infinite_everywhere(self):
        # both the pairwise KL and the tail rate infinite for a pair
        m = ModelSpec(states=["t", "1", "2"], classes=[0, 1, 2], eta=[1.0, 0.0, 0.0],
                      trans=[[0.0, 0.5, 0.5], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                      densities=[Categorical([0.5, 0.5, 0.0]),
                                 Categorical([0.5, 0.0, 0.5]),
                                 Categorical([0.0, 0.5, 0.5])])
        with pytest.raises(lim.InfiniteEverywhere):
            lim.limits_example1(m)


class TestExample2Limits:
    def test_gaussian_blocks_table(self, gaussian_blocks):
        t = lim.limits_example2(gaussian_blocks)
        np.testing.assert_allclose(
            [t.l[0, 0], t.l[0, 2], t.l[1, 0], t.l[1, 1]],
            [0.2854, 0.1250, 0.0713, 0.1104], atol=5e-5)
        # the own-block branch participates in the transient alternative
        assert np.isclose(t.q0[0, 0] + t.varrho[0], 0.18 + abs(np.log(0.9)), atol=1e-8)
        assert np.isclose(t.l[0, 0], t.q0[0, 0] + t.varrho[0], atol=1e-12)
        assert t.jstar[0] == (2,) and t.jstar[1] == (0,)
        assert t.unique_jstar == (True, True)

    def test_infinite_tails_leave_pairwise_kl(self):
        # deterministic absorption in each block: all tail rates infinite
        m = ModelSpec(states=["a", "1", "b", "2"], classes=[0, 1, 0, 2],
                      eta=[0.5, 0.0, 0.5, 0.0],
                      trans=[[0.0, 1.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0],
                             [0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 1.0]],
                      densities=[Gaussian(0.0), Gaussian(1.0), Gaussian(0.2), Gaussian(-1.0)])
        t = lim.limits_example2(m)
        assert t.l[0, 2] == lim.kl(m.densities[1], m.densities[3])
        assert t.l[0, 0] == np.inf and t.l[1, 0] == np.inf

    def test_shape_mismatch(self, categorical_serial):
        with pytest.raises(ShapeMismatch):
            lim.limits_example2(categorical_serial)

    def test_exact_limits_dispatch(self, categorical_parallel, gaussian_blocks):
        assert lim.exact_limits(categorical_parallel).method == "example1"
        assert lim.exact_limits(gaussian_blocks).method == "example2"

    def test_parallel_model_fits_both_shapes_consistently(self, categorical_parallel):
        t1 = lim.limits_example1(categorical_parallel)
        t2 = lim.limits_example2(categorical_parallel)
        fin = np.isfinite(t1.l)
        np.testing.assert_allclose(t1.l[fin], t2.l[fin], atol=1e-12)


class TestLimitsMc:
    def test_agrees_with_exact_within_noise(self, gaussian_blocks, categorical_parallel, categorical_serial):
        for m in (gaussian_blocks, categorical_parallel, categorical_serial):
            exact = lim.exact_limits(m)
            mc = lim.limits_mc(m, n=800, paths=400, seed=99)
            for i in range(1, m.n_classes + 1):
                for j in range(m.n_classes + 1):
                    if j == i:
                        continue
                    # finite-horizon bias is a few per mille at n=800; allow
                    # 3 s.e. plus a bias allowance
                    tol = 3 * mc.se[i - 1, j] + 0.012
                    assert abs(mc.l[i - 1, j] - exact.l[i - 1, j]) < tol

    def test_too_few_conditional_paths(self):
        m = ModelSpec(states=["t", "1", "2"], classes=[0, 1, 2], eta=[1.0, 0.0, 0.0],
                      trans=[[0.5, 0.495, 0.005], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                      densities=[Categorical([0.5, 0.5]), Categorical([0.7, 0.3]),
                                 Categorical([0.3, 0.7])])
        with pytest.raises(lim.TooFewConditionalPaths):
            lim.limits_mc(m, n=100, paths=200, seed=1)

    def test_degenerate_model_flagged(self):
        m = ModelSpec(states=["t", "1"], classes=[0, 1], eta=[1.0, 0.0],
                      trans=[[0.9, 0.1], [0.0, 1.0]],
                      densities=[Categorical([0.5, 0.5]), Categorical([0.5, 0.5])])
        t = lim.limits_mc(m, n=50, paths=100, seed=2)
        assert t.degenerate

    def test_llr_convergence_shapes(self, gaussian_blocks):
        stats = lim.llr_convergence(gaussian_blocks, [40, 80], 300, seed=3)
        assert set(h for (_, _, h) in stats) == {40, 80}
        for (i, j, h), (mean, sd, cnt) in stats.items():
            assert np.isfinite(mean) and np.isfinite(sd) and cnt >= 30
