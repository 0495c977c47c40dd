import numpy as np
import pytest

from hmmdetect import limits as lim, model as md, posterior as post, strategy as strat
from hmmdetect._sim import rng_stream, run_batch
from hmmdetect.model import Categorical, CostSpec, Gaussian, ModelSpec

from conftest import random_model


def fixed_path(model, seed, length):
    src = strat.PathSource(model, seed=seed)
    return [src.observation(n) for n in range(1, length + 1)], src


class TestPiStrategy:
    def test_immediate_trigger_with_loose_threshold(self, categorical_parallel):
        xs, _ = fixed_path(categorical_parallel, 0, 5)
        dec = strat.run_pi_strategy(categorical_parallel, xs, A=[1e9, 1e9])
        assert dec.tau == 1 and not dec.capped
        assert dec.d in (1, 2)

    def test_pi_and_phi_forms_agree(self):
        # the threshold on the class posterior and on its log-odds are the
        # same test; both implementations must stop identically
        for seed in range(20):
            m = random_model(seed)
            xs, _ = fixed_path(m, seed + 500, 400)
            A = np.full(m.n_classes, 0.25)
            dec = strat.run_pi_strategy(m, xs, A, max_horizon=400)
            st = post.init(m)
            tau_phi, d_phi = None, None
            for n, x in enumerate(xs, start=1):
                st = post.update(st, m, x)
                view = post.llr_from_class_mass(st.log_alpha_class, allow_zero_mass=True)
                if np.any(view.phi > -np.log(A)):
                    tau_phi = n
                    d_phi = int(np.argmax(st.pi_class[1:])) + 1
                    break
            if dec.capped:
                assert tau_phi is None
            else:
                assert (dec.tau, dec.d) == (tau_phi, d_phi)

    def test_threshold_monotonicity(self):
        # shrinking every A_i can only delay the alarm on a fixed path
        for seed in range(10):
            m = random_model(seed, family="categorical")
            xs, _ = fixed_path(m, seed + 900, 600)
            taus = []
            for a in (0.5, 0.2, 0.08, 0.03):
                dec = strat.run_pi_strategy(m, xs, np.full(m.n_classes, a), max_horizon=600)
                taus.append(dec.tau if not dec.capped else 10 ** 9)
            assert all(t2 >= t1 for t1, t2 in zip(taus, taus[1:]))

    def test_overshoot_nonnegative(self):
        for seed in range(10):
            m = random_model(seed + 40)
            xs, _ = fixed_path(m, seed + 77, 500)
            dec = strat.run_pi_strategy(m, xs, np.full(m.n_classes, 0.1), max_horizon=500)
            if not dec.capped:
                assert dec.overshoot is not None and dec.overshoot >= 0

    def test_capped_decision(self, categorical_parallel):
        xs, _ = fixed_path(categorical_parallel, 1, 3)
        dec = strat.run_pi_strategy(categorical_parallel, xs, A=[1e-9, 1e-9], max_horizon=3)
        assert dec.capped and dec.tau == 3 and dec.fired_by == 0
        assert dec.d in (1, 2)

    def test_batch_and_single_path_agree(self, categorical_parallel):
        # the vectorized engine and the single-path runner implement the
        # same rule: feed the batch's own observations through the latter
        m = categorical_parallel
        spec = strat.StrategySpec(kind="pi", A=np.array([0.1, 0.1]), max_horizon=2000)
        rng = rng_stream(123, 0)
        out = run_batch(m, spec.trigger(), np.zeros(4), rng, 50, 2000)
        # re-simulate the same paths: same stream, same draw order
        rng2 = rng_stream(123, 0)
        from hmmdetect._sim import HiddenSampler
        from hmmdetect.posterior import batch_init, batch_update, log_transition

        sampler = HiddenSampler(m)
        y = sampler.initial(rng2, 50)
        xs_all = [[] for _ in range(50)]
        alive = np.ones(50, dtype=bool)
        order = np.arange(50)
        la = batch_init(m, 50)
        active = order.copy()
        n = 0
        while active.size and n < 2000:
            n += 1
            y = sampler.step(rng2, y)
            x = sampler.observe(rng2, y)
            for idx_path, xv in zip(active, x):
                xs_all[idx_path].append(int(xv))
            la = batch_update(la, log_transition(m), m.log_obs(x))
            fired, d, fb = spec.trigger()(post.class_log_mass(la, m))
            keep = ~fired
            active, y, la = active[keep], y[keep], la[keep]
        for k in range(50):
            dec = strat.run_pi_strategy(m, xs_all[k], spec.A, max_horizon=len(xs_all[k]))
            assert dec.tau == out.tau[k] and dec.d == out.d[k]


class TestLlrStrategy:
    def test_single_class_reduces_to_scalar_crossing(self):
        m = ModelSpec(states=["t", "1"], classes=[0, 1], eta=[1.0, 0.0],
                      trans=[[0.9, 0.1], [0.0, 1.0]],
                      densities=[Gaussian(0.0), Gaussian(0.8)])
        xs, _ = fixed_path(m, 7, 400)
        B = np.array([[0.05, np.nan]])
        B[0, 1] = 0.5  # unused beyond validation; own column ignored
        dec = strat.run_llr_strategy(m, xs, np.array([[0.05, 0.5]]), max_horizon=400)
        st = post.init(m)
        tau_ref = None
        for n, x in enumerate(xs, start=1):
            st = post.update(st, m, x)
            lac = st.log_alpha_class
            if lac[1] - lac[0] > -np.log(0.05):
                tau_ref = n
                break
        assert dec.tau == tau_ref and dec.d == 1

    def test_sandwich_bracketing(self):
        # crossing times of the min-LLR at the extreme margins bracket the rule
        for seed in range(10):
            m = random_model(seed + 3, family="categorical")
            M = m.n_classes
            rng = np.random.default_rng(seed)
            B = 0.02 + 0.2 * rng.random((M, M + 1))
            xs, _ = fixed_path(m, seed + 31, 500)
            dec = strat.run_llr_strategy(m, xs, B, max_horizon=500)
            st = post.init(m)
            lower = upper = None
            b_hi = np.array([max(B[i - 1, j] for j in range(M + 1) if j != i) for i in range(1, M + 1)])
            b_lo = np.array([min(B[i - 1, j] for j in range(M + 1) if j != i) for i in range(1, M + 1)])
            for n, x in enumerate(xs, start=1):
                st = post.update(st, m, x)
                view = post.llr_from_class_mass(st.log_alpha_class, allow_zero_mass=True)
                psi = view.psi
                if lower is None and np.any(psi > -np.log(b_hi)):
                    lower = n
                if upper is None and np.any(psi > -np.log(b_lo)):
                    upper = n
            if not dec.capped:
                assert lower is not None and lower <= dec.tau
                if upper is not None:
                    assert dec.tau <= upper

    def test_zero_mass_classes_cannot_fire(self, categorical_serial):
        # at n = 1 both class masses are exactly zero; the rule must wait
        xs, _ = fixed_path(categorical_serial, 5, 300)
        dec = strat.run_llr_strategy(categorical_serial, xs, np.full((2, 3), 0.4), max_horizon=300)
        assert dec.tau >= 2


class TestThresholdMaps:
    def test_a_from_c_closed_form(self, categorical_parallel):
        costs = CostSpec.uniform(categorical_parallel, 0.01)
        table = lim.exact_limits(categorical_parallel)
        A = strat.a_from_c(costs, table, categorical_parallel)
        np.testing.assert_allclose(A, 0.01 / table.lstar, rtol=1e-12)
        assert abs(A[0] - 0.0633984) < 1e-6

    def test_sigma_scaling(self, categorical_parallel):
        costs = CostSpec.uniform(categorical_parallel, 0.01)
        table = lim.exact_limits(categorical_parallel)
        a1 = strat.a_from_c(costs, table, categorical_parallel, sigma=np.ones(2))
        a2 = strat.a_from_c(costs, table, categorical_parallel, sigma=2 * np.ones(2))
        np.testing.assert_allclose(a2, a1 / 2, rtol=1e-12)

    def test_higher_moment_minimizer_stationarity(self, categorical_parallel):
        costs = CostSpec.uniform(categorical_parallel, 0.01, m_power=2)
        table = lim.exact_limits(categorical_parallel)
        A = strat.a_from_c(costs, table, categorical_parallel, sigma=np.ones(2))
        for i in range(2):
            g = strat.risk_tradeoff(0.01, table.lstar[i], 1.0, 2)
            h = 1e-6 * A[i]
            deriv = (g(A[i] + h) - g(A[i] - h)) / (2 * h)
            scale = abs(g(A[i])) / A[i]
            assert abs(deriv) / scale < 1e-6

    def test_bad_limit(self, categorical_parallel):
        costs = CostSpec.uniform(categorical_parallel, 0.01)
        table = lim.exact_limits(categorical_parallel)
        broken = lim.LimitTable(l=table.l, lstar=np.array([np.inf, 0.1]),
                                jstar=table.jstar, unique_jstar=table.unique_jstar,
                                method="example1")
        with pytest.raises(strat.BadLimit):
            strat.a_from_c(costs, broken, categorical_parallel)

    def test_b_from_rbar_uniform(self, categorical_parallel):
        rbar = np.full((4, 2), 0.02)
        costs = CostSpec(c=np.zeros(4), rbar=rbar)
        facts = md.chain_facts(categorical_parallel, costs)
        B = strat.b_from_rbar(costs, facts, categorical_parallel)
        for i in (1, 2):
            for j in range(3):
                if j != i:
                    assert np.isclose(B[i - 1, j], 0.04)

    def test_b_from_rbar_min_semantics(self, categorical_parallel):
        rbar = np.full((4, 2), 0.02)
        rbar[0, 0] = 0.002  # tighter cap on one transient state
        costs = CostSpec(c=np.zeros(4), rbar=rbar)
        facts = md.chain_facts(categorical_parallel, costs)
        B = strat.b_from_rbar(costs, facts, categorical_parallel)
        assert np.isclose(B[0, 0], 0.004)
        assert np.isclose(B[1, 0], 0.04)

    def test_b_from_rbar_feasibility_warning(self, categorical_parallel):
        rbar = np.full((4, 2), 0.9)
        costs = CostSpec(c=np.zeros(4), rbar=rbar)
        facts = md.chain_facts(categorical_parallel, costs)
        with pytest.warns(strat.FeasibilityWarning):
            strat.b_from_rbar(costs, facts, categorical_parallel)

    def test_feasibility_by_simulation(self, categorical_parallel):
        # caps hold per state: R_{yi} <= rbar_{yi} within noise
        from hmmdetect import riskeval as re_

        rbar = np.full((4, 2), 0.005)
        costs = CostSpec.uniform(categorical_parallel, 0.0)
        costs = CostSpec(c=costs.c, a=costs.a, rbar=rbar)
        facts = md.chain_facts(categorical_parallel, costs)
        B = strat.b_from_rbar(costs, facts, categorical_parallel)
        spec = strat.StrategySpec(kind="llr", B=B)
        rep = re_.evaluate(categorical_parallel, costs, spec, 40_000, seed=17, facts=facts)
        labels = np.asarray(categorical_parallel.classes)
        for i in (1, 2):
            for y in range(4):
                if labels[y] == i:
                    continue
                est = rep.tdl[y, i - 1]
                se = rep.tdl_se[y, i - 1]
                assert est - 2 * se <= rbar[y, i - 1]


class TestSigma:
    def test_default_sigma_matches_unit_weights(self, categorical_parallel):
        costs = CostSpec.uniform(categorical_parallel, 0.01)
        table = lim.exact_limits(categorical_parallel)
        sigma = strat.default_sigma(costs, table, categorical_parallel)
        np.testing.assert_array_equal(sigma, [1.0, 1.0])

    def test_near_zero_overshoot_gives_sigma_near_one(self):
        # nearly continuous crossings: tiny increments make the overshoot
        # vanish, so the ladder functional approaches a * e^0 = 1
        m = ModelSpec(states=["a", "1", "b", "2"], classes=[0, 1, 0, 2],
                      eta=[0.5, 0.0, 0.5, 0.0],
                      trans=[[0.9, 0.1, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0],
                             [0.0, 0.0, 0.9, 0.1], [0.0, 0.0, 0.0, 1.0]],
                      densities=[Gaussian(0.0), Gaussian(0.04), Gaussian(0.0), Gaussian(-0.04)])
        table = lim.exact_limits(m)
        costs = CostSpec.uniform(m, 0.01)
        est = strat.estimate_sigma(m, table, costs, 1, "renewal_mc", seed=4, samples=30_000)
        assert 0.9 < est.sigma[0] <= 1.0

    def test_methods_agree_gaussian_blocks(self, gaussian_blocks):
        table = lim.exact_limits(gaussian_blocks)
        costs = CostSpec.uniform(gaussian_blocks, 0.01)
        for i in (1, 2):
            ren = strat.estimate_sigma(gaussian_blocks, table, costs, i, "renewal_mc",
                                       seed=21, samples=100_000)
            ovs = strat.estimate_sigma(gaussian_blocks, table, costs, i, "overshoot_mc",
                                       seed=22, samples=30_000, a_small=2e-3)
            gap = abs(ren.sigma[0] - ovs.sigma[0])
            tol = 3 * np.hypot(ren.se[0], ovs.se[0]) + 0.02  # small-A bias allowance
            assert gap < tol, (i, ren.sigma, ovs.sigma, tol)

    def test_non_unique_jstar_refused(self, categorical_parallel):
        table = lim.exact_limits(categorical_parallel)
        costs = CostSpec.uniform(categorical_parallel, 0.01)
        with pytest.raises(strat.NonUniqueJStar):
            strat.estimate_sigma(categorical_parallel, table, costs, 2, "renewal_mc", seed=1, samples=100)


class TestTdlBounds:
    def test_pi_bound_small_budget(self, categorical_parallel):
        # full 1e5-path version lives in the acceptance suite
        from hmmdetect import riskeval as re_

        costs = CostSpec.uniform(categorical_parallel, 0.01)
        facts = md.chain_facts(categorical_parallel, costs)
        abar = costs.abar(categorical_parallel)
        for a_val in (0.1, 0.05):
            spec = strat.StrategySpec(kind="pi", A=np.full(2, a_val))
            rep = re_.evaluate(categorical_parallel, costs, spec, 20_000, seed=3, facts=facts)
            for i in (1, 2):
                est, se = rep.r_i_a[i]
                assert est - 2 * se <= abar[i - 1] * a_val
