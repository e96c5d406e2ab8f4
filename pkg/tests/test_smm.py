"""Tests for moment targets, the SMM objective, and the optimizers."""

import math
from dataclasses import replace

import numpy as np
import pytest

import gfekit.smm as smm_module
from gfekit.behavioral import BehavioralParams, Grid
from gfekit.errors import (DomainError, ParseError, PreconditionError,
                           SolverError)
from gfekit.smm import (
    DEFAULT_BOUNDS,
    MomentTarget,
    SmmConfig,
    bundled_target_path,
    fit_smm,
    load_moment_target,
    nelder_mead,
    simulated_annealing,
    simulated_moments,
    smm_objective,
)

PARAMS = BehavioralParams()
TINY_GRID = Grid(n_m_levels=25, t_solve=10, mc_draws=60, bound_paths=60)


class TestMomentTarget:
    def test_accepts_fractions_with_weights(self):
        t = MomentTarget(values=np.full((2, 8), 0.05))
        assert t.weights.shape == (2, 8)
        assert np.all(t.weights == 1.0)

    def test_rejects_out_of_range_values(self):
        with pytest.raises(DomainError):
            MomentTarget(values=np.array([[0.5, 1.5]]))
        with pytest.raises(DomainError):
            MomentTarget(values=np.array([[-0.1, 0.5]]))

    def test_rejects_bad_weights(self):
        with pytest.raises(DomainError):
            MomentTarget(values=np.full((2, 3), 0.1),
                         weights=np.full((2, 3), 0.0))
        with pytest.raises(PreconditionError):
            MomentTarget(values=np.full((2, 3), 0.1),
                         weights=np.ones((3, 2)))

    def test_rejects_one_dimensional_values(self):
        with pytest.raises(PreconditionError):
            MomentTarget(values=np.array([0.1, 0.2]))


class TestLoadMomentTarget:
    def test_bundled_file_is_frozen(self):
        target = load_moment_target(bundled_target_path())
        assert target.values.shape == (2, 8)
        assert target.values[0, 0] == pytest.approx(0.004)
        assert target.values[0, -1] == pytest.approx(0.064)
        assert target.values[1, 0] == pytest.approx(0.002)
        assert target.values[1, -1] == pytest.approx(0.076)
        # both series rise with age
        assert np.all(np.diff(target.values, axis=1) > 0)

    def test_label_column_is_skipped(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("group,a16,a17\nlow,0.1,0.2\nhigh,0.3,0.4\n")
        target = load_moment_target(path)
        assert target.values.tolist() == [[0.1, 0.2], [0.3, 0.4]]

    def test_ragged_rows_rejected(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("group,a16,a17\nlow,0.1,0.2\nhigh,0.3\n")
        with pytest.raises(ParseError, match="ragged"):
            load_moment_target(path)

    def test_non_numeric_cell_reports_line(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("group,a16,a17\nlow,0.1,oops\n")
        with pytest.raises(ParseError, match="line 2"):
            load_moment_target(path)

    def test_empty_body_rejected(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("group,a16,a17\n")
        with pytest.raises(ParseError):
            load_moment_target(path)


class TestSmmConfig:
    def test_defaults_cover_all_parameters(self):
        cfg = SmmConfig()
        assert set(cfg.free) <= set(cfg.bounds)

    def test_rejects_empty_free_set(self):
        with pytest.raises(PreconditionError):
            SmmConfig(free=())

    def test_rejects_missing_bounds(self):
        with pytest.raises(PreconditionError):
            SmmConfig(free=("beta1",), bounds={"beta2": (0.1, 1.0)})

    def test_rejects_inverted_bounds(self):
        bounds = dict(DEFAULT_BOUNDS)
        bounds["beta1"] = (1.0, 0.5)
        with pytest.raises(PreconditionError):
            SmmConfig(bounds=bounds)

    def test_rejects_unknown_moment_mode(self):
        with pytest.raises(PreconditionError):
            SmmConfig(moment_mode="sometimes")


@pytest.fixture(scope="module")
def objective_target():
    cfg = SmmConfig(free=("beta2",), n_paths=2000, sim_seed=0)
    values = simulated_moments(PARAMS, cfg, TINY_GRID)
    return cfg, MomentTarget(values=values)


class TestSmmObjective:

    def test_zero_at_generating_parameters(self, objective_target):
        cfg, target = objective_target
        assert smm_objective(PARAMS, target, cfg, TINY_GRID) == 0.0

    def test_deterministic_under_common_random_numbers(self, objective_target):
        cfg, target = objective_target
        cand = replace(PARAMS, beta2=0.4)
        a = smm_objective(cand, target, cfg, TINY_GRID)
        b = smm_objective(cand, target, cfg, TINY_GRID)
        assert a == b
        assert a > 0.0

    def test_single_cell_gap_oracle(self, objective_target):
        cfg, target = objective_target
        shifted = target.values.copy()
        shifted[0, 0] = min(1.0, shifted[0, 0] + 0.01)
        bumped = MomentTarget(values=shifted)
        got = smm_objective(PARAMS, bumped, cfg, TINY_GRID)
        assert got == pytest.approx(0.01 ** 2 / 16.0, rel=1e-12)

    def test_weights_reallocate_the_average(self, objective_target):
        cfg, target = objective_target
        shifted = target.values.copy()
        shifted[0, 0] = min(1.0, shifted[0, 0] + 0.01)
        weights = np.ones_like(shifted)
        weights[0, 0] = 31.0  # the gap cell now carries 31 of 46 weight
        bumped = MomentTarget(values=shifted, weights=weights)
        got = smm_objective(PARAMS, bumped, cfg, TINY_GRID)
        assert got == pytest.approx(31.0 * 0.01 ** 2 / 46.0, rel=1e-12)

    def test_solver_failure_maps_to_infinite_objective(self, objective_target,
                                                       monkeypatch):
        cfg, target = objective_target

        def boom(*args, **kwargs):
            raise SolverError("no convergence")

        monkeypatch.setattr(smm_module, "solve_policy", boom)
        assert smm_objective(PARAMS, target, cfg, TINY_GRID) == math.inf


class TestSimulatedAnnealing:
    def test_convex_scalar_target(self):
        res = simulated_annealing(lambda x: (x[0] - 2.0) ** 2,
                                  x0=np.array([0.0]),
                                  bounds=[(-10.0, 10.0)], seed=0)
        assert abs(res.x[0] - 2.0) < 1e-2

    def test_rosenbrock_reaches_reference_level(self):
        def rosen(x):
            return (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2

        res = simulated_annealing(rosen, x0=np.array([-1.0, 2.0]),
                                  bounds=[(-5.0, 5.0)] * 2, seed=0)
        assert res.fun < 1e-3

    def test_trace_is_bit_identical_across_runs(self):
        def fun(x):
            return float(np.sum(x ** 2))

        kwargs = dict(x0=np.array([3.0, -4.0]), bounds=[(-5.0, 5.0)] * 2,
                      seed=11, t0=1.0, inner=5, tmin=1e-3)
        a = simulated_annealing(fun, **kwargs)
        b = simulated_annealing(fun, **kwargs)
        assert np.array_equal(a.trace, b.trace)
        assert np.array_equal(a.x, b.x)

    def test_moves_stay_inside_bounds(self):
        seen = []

        def fun(x):
            seen.append(x.copy())
            return float(np.sum(x ** 2))

        simulated_annealing(fun, x0=np.array([0.9]),
                            bounds=[(-1.0, 1.0)], seed=3, t0=10.0,
                            inner=20, tmin=1e-2)
        stacked = np.vstack(seen)
        assert np.all(stacked >= -1.0) and np.all(stacked <= 1.0)

    def test_best_trace_non_increasing(self):
        def fun(x):
            return float(np.cos(3 * x[0]) + x[0] ** 2 / 10)

        res = simulated_annealing(fun, x0=np.array([4.0]),
                                  bounds=[(-6.0, 6.0)], seed=1,
                                  t0=1.0, inner=10, tmin=1e-4)
        assert all(b >= a for a, b in zip(res.best_trace[1:],
                                          res.best_trace))

    def test_flat_objective_keeps_start(self):
        res = simulated_annealing(lambda x: 1.0, x0=np.array([0.25]),
                                  bounds=[(0.0, 1.0)], seed=0, t0=1.0,
                                  inner=5, tmin=1e-2)
        assert res.x[0] == 0.25
        assert res.fun == 1.0

    def test_stall_stop_reported(self):
        res = simulated_annealing(lambda x: 0.0, x0=np.array([0.5]),
                                  bounds=[(0.0, 1.0)], seed=0, t0=100.0,
                                  inner=2, tmin=1e-12, stall=2)
        assert res.stopped == "stall"


class TestNelderMead:
    def test_convex_scalar(self):
        res = nelder_mead(lambda x: (x[0] - 2.0) ** 2, np.array([0.0]))
        assert res.x[0] == pytest.approx(2.0, abs=1e-6)

    def test_two_dim_quadratic(self):
        def fun(x):
            return (x[0] - 1.0) ** 2 + 2.0 * (x[1] + 3.0) ** 2

        res = nelder_mead(fun, np.array([0.0, 0.0]))
        assert res.x == pytest.approx([1.0, -3.0], abs=1e-6)

    def test_start_at_optimum_returns_same_point(self):
        res = nelder_mead(lambda x: (x[0] - 2.0) ** 2, np.array([2.0]))
        assert res.x[0] == 2.0

    def test_rosenbrock(self):
        def rosen(x):
            return (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2

        res = nelder_mead(rosen, np.array([-1.2, 1.0]))
        assert res.x == pytest.approx([1.0, 1.0], abs=1e-3)

    def test_never_worse_than_start(self):
        # a spiky target with a cliff right next to the start
        def fun(x):
            return float(np.where(x[0] > 0.1, 1e6, x[0] ** 2))

        start = np.array([0.05])
        res = nelder_mead(fun, start)
        assert res.fun <= fun(start)

    def test_evaluation_cap_respected(self):
        calls = []

        def fun(x):
            calls.append(1)
            return float(np.sum(x ** 2))

        nelder_mead(fun, np.array([5.0, 5.0, 5.0]), max_evals=40)
        assert len(calls) <= 41

    def test_flat_region_returns_start(self):
        res = nelder_mead(lambda x: 7.0, np.array([0.3, 0.4]))
        assert res.x == pytest.approx([0.3, 0.4])


@pytest.fixture(scope="module")
def round_trip():
    truth = replace(PARAMS, beta2=0.6)
    cfg = SmmConfig(
        free=("beta2",), bounds={"beta2": (0.3, 0.9)},
        sa_t0=1e-4, sa_reduction=0.3, sa_inner=5, sa_tmin=1e-6,
        sa_stall=2, nm_max_evals=60, n_paths=2000, sim_seed=0)
    target = MomentTarget(values=simulated_moments(truth, cfg,
                                                   TINY_GRID))
    fit = fit_smm(target, cfg, TINY_GRID, seed=0, base=truth,
                  start=(0.45,))
    return truth, cfg, target, fit


class TestFitSmm:

    def test_recovers_generating_parameter(self, round_trip):
        truth, _, _, fit = round_trip
        assert fit.objective <= 1e-6
        assert fit.params.beta2 == pytest.approx(0.6, abs=0.1)

    def test_final_objective_not_above_annealing_best(self, round_trip):
        _, _, _, fit = round_trip
        assert fit.objective <= fit.sa.fun + 1e-15

    def test_fitted_moments_match_reported_objective(self, round_trip):
        _, _, target, fit = round_trip
        gaps = fit.moments - target.values
        implied = float(np.mean(gaps ** 2))
        assert fit.objective == pytest.approx(implied, abs=1e-12)

    def test_metadata_flags_present(self, round_trip):
        _, _, _, fit = round_trip
        meta = fit.metadata
        assert meta["common_random_numbers"] is True
        assert meta["moment_mode"] == "ever"
        assert "kappa_convention" in meta
        assert meta["free_parameters"] == ["beta2"]

    def test_bounds_clamp_the_fit(self):
        # the generating value sits outside the allowed interval, so the
        # fit must stop at the boundary rather than chase it
        truth = replace(PARAMS, beta2=0.6)
        cfg = SmmConfig(
            free=("beta2",), bounds={"beta2": (0.65, 0.9)},
            sa_t0=1e-4, sa_reduction=0.3, sa_inner=4, sa_tmin=1e-5,
            sa_stall=2, nm_max_evals=40, n_paths=1000, sim_seed=0)
        target = MomentTarget(values=simulated_moments(truth, cfg,
                                                       TINY_GRID))
        fit = fit_smm(target, cfg, TINY_GRID, seed=0, base=truth,
                      start=(0.8,))
        assert 0.65 <= fit.params.beta2 <= 0.9

    def test_start_defaults_to_base_values(self):
        cfg = SmmConfig(
            free=("delta",), bounds={"delta": (0.6, 0.99)},
            sa_t0=1e-4, sa_reduction=0.3, sa_inner=3, sa_tmin=1e-4,
            sa_stall=1, nm_max_evals=20, n_paths=500, sim_seed=0)
        target = MomentTarget(values=simulated_moments(PARAMS, cfg,
                                                       TINY_GRID))
        fit = fit_smm(target, cfg, TINY_GRID, seed=0, base=PARAMS)
        assert fit.start == pytest.approx([PARAMS.delta])
