import dataclasses
import filecmp

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p2m.cooptim import (
    CoOptimizeConfig, CostModel, DesignSpace, GpRegressor, UqResult,
    co_optimize, evaluate_design, hypervolume_2d, indicator_positive, lcom,
    pareto_front, propose_designs, uq_from_samples,
)
from p2m.desk import desk_scenario_source
from p2m.plant import derive_pem_capacity
from p2m.scenarios import Scenario


class TestDesignSpace:
    def test_default_bounds(self, design_space):
        assert design_space.names == ("m_meoh", "alpha_pem", "c_bess", "c_cht")
        assert design_space.lowers == pytest.approx([432.49, 0.0, 5.0, 89.77])
        assert design_space.uppers == pytest.approx([2162.47, 1.0, 100.0, 1795.33])

    def test_corner_round_trip(self, design_space):
        for corner in (design_space.lowers, design_space.uppers):
            back = design_space.denormalize(design_space.normalize(corner))
            assert np.allclose(back, corner, rtol=1e-12, atol=1e-12)

    def test_normalized_image_is_unit_box(self, design_space):
        raw = design_space.sample_lhs(16, seed=0)
        unit = np.array([design_space.normalize(r) for r in raw])
        assert np.all(unit >= 0.0) and np.all(unit <= 1.0)

    def test_bad_bounds_rejected(self):
        with pytest.raises(ValueError):
            DesignSpace(("a",), np.array([1.0]), np.array([1.0]), ("-",))


class TestIndicator:
    @pytest.mark.parametrize("e,expected", [(-5.0, 0), (0.0, 1), (3.0, 1)])
    def test_reference_values(self, e, expected):
        assert indicator_positive(e) == expected

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            indicator_positive(float("nan"))


class TestLcom:
    def test_zero_cost_zero_profit(self, design):
        free = CostModel(0.0, 0.0, 0.0, 0.0, crf=1.0, fom_frac=0.0)
        assert lcom(design, 0.0, 1000.0, free) == 0.0

    def test_profit_linearity(self, design):
        cm = CostModel()
        mass = 432.49 * 576
        delta = 12345.0
        drop = lcom(design, 0.0, mass, cm) - lcom(design, delta, mass, cm)
        assert drop == pytest.approx(delta / mass, rel=1e-12)

    def test_unit_cost_model_hand_value(self, params):
        d = derive_pem_capacity(500.0, 0.5, 20.0, 300.0, params)
        unit = CostModel(1.0, 1.0, 1.0, 1.0, crf=1.0, fom_frac=0.0)
        capacity_sum = d.c_pem + d.c_bess + d.c_cht + d.m_meoh
        profit, mass = 37.5, 2000.0
        assert lcom(d, profit, mass, unit) == pytest.approx(
            (capacity_sum / 12.0 - profit) / mass, rel=1e-12)

    def test_nonpositive_mass_rejected(self, design):
        with pytest.raises(ValueError):
            lcom(design, 0.0, 0.0, CostModel())


class TestUqEstimator:
    def test_p_positive_is_indicator_mean(self, design, rng):
        es = rng.normal(0.0, 10.0, size=200)
        res = uq_from_samples(design, np.ones(200), es, mode="lp")
        assert res.p_positive == np.mean(es >= 0.0)
        assert res.expected_emissions == pytest.approx(es.mean())

    def test_bernoulli_estimate_within_binomial_bound(self, design):
        # P(|p_hat - 0.3| > 0.05) < 1% at M=1000; seeded draw stays inside
        r = np.random.default_rng(42)
        es = np.where(r.random(1000) < 0.3, 1.0, -1.0)
        res = uq_from_samples(design, np.ones(1000), es, mode="agent")
        assert abs(res.p_positive - 0.3) <= 0.05

    def test_failure_ratio_flags_unusable(self, design):
        res = uq_from_samples(design, np.ones(8), -np.ones(8), mode="lp",
                              n_failed=2, n_requested=10)
        assert not res.usable
        ok = uq_from_samples(design, np.ones(19), -np.ones(19), mode="lp",
                             n_failed=1, n_requested=20)
        assert ok.usable


class TestEvaluateDesign:
    def test_single_scenario_expectations(self, params, design, short_scenarios):
        res = evaluate_design(design, short_scenarios[:1], "lp", params,
                              CostModel())
        assert res.n_scenarios == 1
        assert res.expected_lcom == res.lcom_samples[0]
        assert res.expected_emissions == res.emission_samples[0]

    def test_lp_mode_with_slack_constraint_is_chance_feasible(self, params):
        # minimum electrolyzer and abundant wind: the optimum never imports,
        # so net emissions stay strictly negative in every scenario
        design = derive_pem_capacity(600.0, 0.0, 10.0, 200.0, params)
        scenarios = desk_scenario_source(horizon=96)(3, seed=5)
        res = evaluate_design(design, scenarios, "lp", params, CostModel())
        assert np.all(res.emission_samples < 0.0)
        assert res.p_positive == 0.0

    def test_failed_scenarios_excluded_and_flagged(self, params):
        design = derive_pem_capacity(600.0, 0.0, 10.0, 200.0, params)
        good = desk_scenario_source(horizon=96)(3, seed=5)
        dead = [Scenario.from_wind(np.zeros(96), np.full(96, 40.0))]
        res = evaluate_design(design, good + dead, "lp", params, CostModel())
        assert res.n_failed == 1
        assert res.n_scenarios == 3
        assert not res.usable  # 25% failures > 10%

    def test_agent_mode_requires_model(self, params, design, short_scenarios):
        with pytest.raises(ValueError):
            evaluate_design(design, short_scenarios, "agent", params, CostModel())


class TestGp:
    def test_interpolates_duplicated_history(self):
        x = np.array([[0.3, 0.7], [0.3, 0.7]])
        y = np.array([2.5, 2.5])
        gp = GpRegressor().fit(x, y)
        mean, _ = gp.predict([[0.3, 0.7]])
        assert mean[0] == pytest.approx(2.5, abs=1e-6)

    def test_recovers_smooth_function(self, rng):
        x = rng.random((40, 2))
        y = np.sin(3 * x[:, 0]) + x[:, 1] ** 2
        gp = GpRegressor().fit(x, y)
        xs = rng.random((10, 2))
        mean, _ = gp.predict(xs)
        truth = np.sin(3 * xs[:, 0]) + xs[:, 1] ** 2
        assert np.abs(mean - truth).max() < 0.15

    def test_uncertainty_grows_off_data(self):
        x = np.array([[0.5, 0.5]])
        gp = GpRegressor().fit(x, np.array([1.0]))
        _, sd_near = gp.predict([[0.5, 0.5]])
        _, sd_far = gp.predict([[0.0, 0.0]])
        assert sd_far[0] > sd_near[0]


def _fake_result(design, f1, f2, p=0.0):
    return UqResult(design=design, expected_lcom=f1, expected_emissions=f2,
                    p_positive=p, lcom_samples=np.array([f1]),
                    emission_samples=np.array([f2]), n_scenarios=1, mode="lp")


class TestProposeDesigns:
    def test_thin_history_falls_back_to_lhs(self, design_space):
        out = propose_designs([], 6, seed=0, design_space=design_space)
        assert out.shape == (6, 4)
        for row in out:
            assert design_space.contains(row)

    def test_proposals_stay_in_box_and_are_deterministic(self, params,
                                                         design_space):
        rng = np.random.default_rng(0)
        history = []
        for raw in design_space.sample_lhs(12, seed=1):
            d = derive_pem_capacity(*raw, params)
            history.append((d, _fake_result(d, rng.random(), rng.random())))
        a = propose_designs(history, 5, seed=3, design_space=design_space)
        b = propose_designs(history, 5, seed=3, design_space=design_space)
        assert np.array_equal(a, b)
        for row in a:
            assert design_space.contains(row)


def brute_force_front(points):
    out = []
    for i, (a1, a2) in enumerate(points):
        dominated = any(
            (b1 <= a1 and b2 <= a2) and (b1 < a1 or b2 < a2)
            for j, (b1, b2) in enumerate(points) if j != i)
        if not dominated:
            out.append(i)
    return out


class TestParetoFront:
    def _results(self, params, pairs, ps=None):
        d = derive_pem_capacity(800.0, 0.2, 20.0, 300.0, params)
        ps = ps if ps is not None else [0.0] * len(pairs)
        return [_fake_result(d, f1, f2, p) for (f1, f2), p in zip(pairs, ps)]

    def test_single_point(self, params):
        res = self._results(params, [(1.0, 2.0)])
        assert pareto_front(res) == res

    def test_strict_dominance(self, params):
        res = self._results(params, [(1.0, 1.0), (2.0, 2.0)])
        assert pareto_front(res) == [res[0]]

    def test_matches_brute_force_on_cloud(self, params, rng):
        pairs = [(float(a), float(b)) for a, b in rng.random((50, 2))]
        res = self._results(params, pairs)
        front = pareto_front(res)
        expected = {(res[i].expected_lcom, res[i].expected_emissions)
                    for i in brute_force_front(pairs)}
        got = {(r.expected_lcom, r.expected_emissions) for r in front}
        assert got == expected
        lcoms = [r.expected_lcom for r in front]
        assert lcoms == sorted(lcoms)

    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)),
                    min_size=1, max_size=25))
    @settings(max_examples=60, deadline=None)
    def test_matches_brute_force_with_ties(self, int_pairs):
        from p2m.params import for_region
        params = for_region("skive")
        pairs = [(float(a), float(b)) for a, b in int_pairs]
        res = self._results(params, pairs)
        front = pareto_front(res)
        expected = sorted((pairs[i] for i in brute_force_front(pairs)))
        got = sorted((r.expected_lcom, r.expected_emissions) for r in front)
        assert got == expected

    def test_chance_filter_excludes_risky(self, params):
        res = self._results(params, [(1.0, 1.0), (0.5, 0.5)], ps=[0.2, 0.9])
        front = pareto_front(res, alpha_chance=0.5)
        assert front == [res[0]]
        assert all(r.p_positive <= 0.5 for r in front)

    def test_empty_when_nothing_feasible(self, params):
        res = self._results(params, [(1.0, 1.0)], ps=[0.9])
        assert pareto_front(res, alpha_chance=0.5) == []


class TestHypervolume:
    def test_single_rectangle(self):
        assert hypervolume_2d([(1.0, 1.0)], (3.0, 2.0)) == pytest.approx(2.0)

    def test_matches_grid_oracle(self, rng):
        pts = rng.random((12, 2))
        ref = np.array([1.2, 1.2])
        hv = hypervolume_2d(pts, ref)
        xs = np.linspace(0, ref[0], 400, endpoint=False)
        ys = np.linspace(0, ref[1], 400, endpoint=False)
        gx, gy = np.meshgrid(xs + ref[0] / 800, ys + ref[1] / 800)
        dominated = np.zeros_like(gx, dtype=bool)
        for px, py in pts:
            dominated |= (gx >= px) & (gy >= py)
        oracle = dominated.mean() * ref[0] * ref[1]
        assert hv == pytest.approx(oracle, abs=0.01)

    def test_points_beyond_reference_ignored(self):
        assert hypervolume_2d([(2.0, 2.0)], (1.0, 1.0)) == 0.0


class TestCoOptimize:
    def test_bookkeeping_and_determinism(self, params, tmp_path):
        config = CoOptimizeConfig(params=params, mode="lp", iterations=1,
                                  batch_size=4, n_scenarios=2, seed=12)
        source = desk_scenario_source(horizon=48)
        a = co_optimize(config, source, out_dir=tmp_path / "a")
        assert len(a.evaluations) == 4
        b = co_optimize(config, source, out_dir=tmp_path / "b")
        assert filecmp.cmp(tmp_path / "a" / "evaluations.csv",
                           tmp_path / "b" / "evaluations.csv", shallow=False)
        assert filecmp.cmp(tmp_path / "a" / "pareto.csv",
                           tmp_path / "b" / "pareto.csv", shallow=False)
        assert (tmp_path / "a" / "samples" / "design_000.csv").exists()
        assert (tmp_path / "a" / "config.json").exists()

    def test_front_never_shrinks_in_hypervolume(self, params):
        # alpha=1 keeps every usable design chance-feasible so the check
        # isolates the accumulated-nondominated-set monotonicity
        config = CoOptimizeConfig(params=params, mode="lp", iterations=2,
                                  batch_size=3, n_scenarios=2, seed=4,
                                  alpha_chance=1.0)
        source = desk_scenario_source(horizon=48)
        result = co_optimize(config, source)
        first_batch = result.evaluations[:3]
        usable = [r for r in result.evaluations if r.n_scenarios > 0]
        assert usable, "no usable evaluations in the toy run"
        pts_all = [(r.expected_lcom, r.expected_emissions)
                   for r in result.front]
        pts_first = [(r.expected_lcom, r.expected_emissions)
                     for r in pareto_front(first_batch, 1.0)]
        ref = (max(r.expected_lcom for r in usable) + 1.0,
               max(r.expected_emissions for r in usable) + 1.0)
        assert (hypervolume_2d(pts_all, ref)
                >= hypervolume_2d(pts_first, ref) - 1e-12)
