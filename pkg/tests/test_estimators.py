"""Tests for the pooled, within, and grouped estimators plus BIC."""

import itertools
import math

import numpy as np
import pytest

from gfekit.errors import (
    DomainError,
    NoWithinVariationError,
    PreconditionError,
    SchemaError,
)
from gfekit.estimators import (
    assign_groups,
    bic,
    default_restarts,
    fe_fit,
    gfe_fit,
    group_flow,
    ols_fit,
    profile_regression,
    select_groups,
)
from gfekit.panel import DesignSpec, PanelDataset, build_design

TREAT_ONLY = DesignSpec(regressors=("treatment",))


def random_panel(n, t, seed, treat_effect=0.0, group_profiles=None,
                 labels=None, noise_sd=1.0):
    rng = np.random.default_rng(seed)
    treatment = rng.integers(0, 2, size=(n, t)).astype(float)
    outcome = treat_effect * treatment + rng.normal(0, noise_sd, (n, t))
    if group_profiles is not None:
        outcome += np.asarray(group_profiles)[np.asarray(labels)]
    return PanelDataset(
        unit=np.repeat(np.arange(1, n + 1), t),
        period=np.tile(np.arange(1, t + 1), n),
        outcome=outcome.ravel(), treatment=treatment.ravel(),
        covariates=np.zeros((n * t, 0)),
    )


def exhaustive_gfe_objective(panel, G=2):
    """Global optimum by enumerating every assignment (independent of
    the estimator's alternation: each candidate is scored by a plain
    least-squares fit on explicit group-by-period dummies)."""
    n, t = panel.n_units, panel.n_periods
    x = panel.treatment.reshape(-1, 1)
    y = panel.outcome
    best = math.inf
    for labels in itertools.product(range(G), repeat=n):
        labels = np.asarray(labels)
        if len(set(labels.tolist())) < G:
            continue
        dummies = np.zeros((n * t, G * t))
        cell = labels.repeat(t) * t + np.tile(np.arange(t), n)
        dummies[np.arange(n * t), cell] = 1.0
        design = np.hstack([x, dummies])
        _, res, rank, _ = np.linalg.lstsq(design, y, rcond=None)
        if rank < design.shape[1]:
            resid = y - design @ np.linalg.lstsq(design, y, rcond=None)[0]
            ssr = float(resid @ resid)
        else:
            ssr = float(res[0]) if res.size else 0.0
        best = min(best, ssr / y.size)
    return best


class TestOls:
    def test_matches_normal_equations(self):
        rng = np.random.default_rng(0)
        x = np.column_stack([np.ones(30), rng.normal(size=30)])
        y = rng.normal(size=30)
        ids = np.repeat(np.arange(6), 5)
        fit = ols_fit(x, outcome=y, cluster_ids=ids, names=("const", "x"))
        expected = np.linalg.solve(x.T @ x, x.T @ y)
        assert np.allclose(fit.coefficients, expected, atol=1e-12)
        assert fit.objective == pytest.approx(
            float((y - x @ expected) @ (y - x @ expected)) / 30)

    def test_treatment_accessors(self):
        panel = random_panel(8, 4, seed=1, treat_effect=0.5)
        built = build_design(panel, DesignSpec(
            regressors=("const", "treatment")))
        fit = ols_fit(built)
        assert fit.treatment_ix == 1
        assert fit.xi_hat == pytest.approx(fit.coefficients[1])
        assert fit.xi_se > 0

    def test_no_treatment_column(self):
        fit = ols_fit(np.ones((10, 1)), outcome=np.ones(10),
                      cluster_ids=np.repeat([0, 1], 5))
        with pytest.raises(SchemaError):
            fit.xi_hat


class TestFe:
    @pytest.mark.parametrize("seed", range(5))
    def test_equals_dummy_variable_ols(self, seed):
        panel = random_panel(12, 5, seed=seed, treat_effect=0.3)
        fit = fe_fit(panel, TREAT_ONLY)
        n, t = panel.n_units, panel.n_periods
        dummies = np.zeros((n * t, n))
        dummies[np.arange(n * t), np.repeat(np.arange(n), t)] = 1.0
        design = np.hstack([panel.treatment.reshape(-1, 1), dummies])
        coef, *_ = np.linalg.lstsq(design, panel.outcome, rcond=None)
        assert fit.coefficients[0] == pytest.approx(coef[0], abs=1e-10)

    def test_equals_dummy_variable_ols_with_period_dummies(self):
        panel = random_panel(10, 4, seed=9, treat_effect=0.3)
        spec = DesignSpec(regressors=("treatment",), period_effects=True)
        fit = fe_fit(panel, spec)
        n, t = panel.n_units, panel.n_periods
        unit_d = np.zeros((n * t, n))
        unit_d[np.arange(n * t), np.repeat(np.arange(n), t)] = 1.0
        period_d = np.column_stack([
            (panel.t_index() == k).astype(float) for k in range(2, t + 1)])
        design = np.hstack([panel.treatment.reshape(-1, 1), period_d,
                            unit_d])
        coef, *_ = np.linalg.lstsq(design, panel.outcome, rcond=None)
        assert fit.coefficients[0] == pytest.approx(coef[0], abs=1e-10)

    def test_rejects_unit_constant_regressor(self):
        panel = random_panel(6, 4, seed=2)
        z = np.repeat(np.arange(6, dtype=float), 4)
        with_cov = PanelDataset(
            unit=panel.unit, period=panel.period, outcome=panel.outcome,
            treatment=panel.treatment, covariates=z.reshape(-1, 1),
            covariate_names=("z",))
        with pytest.raises(NoWithinVariationError, match="z"):
            fe_fit(with_cov, DesignSpec(regressors=("treatment", "z")))

    def test_requires_balance(self):
        gappy = PanelDataset(unit=np.array([1, 1, 2]),
                             period=np.array([1, 2, 1]),
                             outcome=np.zeros(3), treatment=np.zeros(3),
                             covariates=np.zeros((3, 0)))
        with pytest.raises(PreconditionError):
            fe_fit(gappy, TREAT_ONLY)


class TestAssignGroups:
    def test_nearest_profile(self):
        resid = np.array([[0.0, 0.0], [1.0, 1.0], [0.4, 0.4]])
        profiles = np.array([[0.0, 0.0], [1.0, 1.0]])
        assert assign_groups(resid, profiles).tolist() == [1, 2, 1]

    def test_tie_breaks_to_lowest_index(self):
        resid = np.array([[0.5, 0.5]])
        profiles = np.array([[0.0, 0.0], [1.0, 1.0]])
        assert assign_groups(resid, profiles).tolist() == [1]


class TestGfe:
    @pytest.mark.parametrize("seed", range(8))
    def test_attains_exhaustive_optimum_on_tiny_instances(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 7))
        panel = random_panel(n, 3, seed=seed + 100, treat_effect=0.4,
                             group_profiles=np.array([[0, 0, 0],
                                                      [2, 2, 2.0]]),
                             labels=rng.integers(0, 2, n))
        truth = exhaustive_gfe_objective(panel, G=2)
        fit = gfe_fit(panel, TREAT_ONLY, 2, restarts=50, seed=seed)
        assert fit.objective >= truth - 1e-9
        assert fit.objective == pytest.approx(truth, abs=1e-8)

    def test_labels_one_based_and_profiles_sorted(self):
        panel = random_panel(30, 4, seed=3,
                             group_profiles=np.array([[3.0] * 4,
                                                      [0.0] * 4,
                                                      [-3.0] * 4]),
                             labels=np.arange(30) % 3, noise_sd=0.1)
        fit = gfe_fit(panel, TREAT_ONLY, 3, restarts=20, seed=0)
        assert set(fit.labels.tolist()) == {1, 2, 3}
        assert np.all(np.diff(fit.profiles[:, -1]) >= 0)

    def test_objective_nonincreasing_within_run(self):
        panel = random_panel(40, 5, seed=4)
        fit = gfe_fit(panel, TREAT_ONLY, 3, restarts=10, seed=1)
        trace = np.asarray(fit.iteration_objectives)
        assert np.all(np.diff(trace) <= 1e-9)

    def test_deterministic_under_seed(self):
        panel = random_panel(25, 4, seed=5)
        a = gfe_fit(panel, TREAT_ONLY, 2, restarts=10, seed=42)
        b = gfe_fit(panel, TREAT_ONLY, 2, restarts=10, seed=42)
        assert a.objective == b.objective
        assert np.array_equal(a.labels, b.labels)
        assert np.allclose(a.profiles, b.profiles)

    def test_no_empty_groups_even_with_bad_warm_start(self):
        panel = random_panel(20, 3, seed=6, noise_sd=0.2)
        far = np.array([[0.0] * 3, [1e6] * 3])
        fit = gfe_fit(panel, TREAT_ONLY, 2, restarts=0,
                      warm_starts=[(far, None)], seed=0)
        counts = np.bincount(fit.labels, minlength=3)[1:]
        assert np.all(counts >= 1)

    def test_demeaned_g1_equals_two_way_fe(self):
        panel = random_panel(15, 5, seed=7, treat_effect=0.2)
        gfe = gfe_fit(panel, TREAT_ONLY, 1, restarts=3, demean=True, seed=0)
        fe = fe_fit(panel, DesignSpec(regressors=("treatment",),
                                      period_effects=True))
        assert gfe.coefficients[0] == pytest.approx(fe.coefficients[0],
                                                    abs=1e-10)

    def test_rejects_period_effects_spec(self):
        panel = random_panel(10, 3, seed=8)
        with pytest.raises(SchemaError):
            gfe_fit(panel, DesignSpec(regressors=("treatment",),
                                      period_effects=True), 2)

    def test_g_bounds(self):
        panel = random_panel(5, 3, seed=9)
        with pytest.raises(PreconditionError):
            gfe_fit(panel, TREAT_ONLY, 0)
        with pytest.raises(PreconditionError):
            gfe_fit(panel, TREAT_ONLY, 6)

    def test_needs_some_initialisation(self):
        panel = random_panel(5, 3, seed=9)
        with pytest.raises(PreconditionError):
            gfe_fit(panel, TREAT_ONLY, 2, restarts=0)

    def test_default_restarts_thresholds(self):
        assert default_restarts(2000) == 100
        assert default_restarts(2001) == 25


class TestBic:
    def test_standard_worked_example(self):
        value = bic(0.0, n_units=1000, n_periods=10, n_covariates=0, G=3,
                    sigma2_hat=1.0, variant="standard")
        assert value == pytest.approx(1030 / 10000 * math.log(10000),
                                      rel=1e-12)

    def test_steep_worked_example(self):
        value = bic(0.0, n_units=1000, n_periods=10, n_covariates=0, G=2,
                    sigma2_hat=1.0, variant="steep")
        assert value == pytest.approx(2 * 1008 / 10000 * math.log(10000),
                                      rel=1e-12)

    def test_objective_enters_additively(self):
        base = bic(0.0, 100, 5, 1, 2, 0.5, "standard")
        assert bic(0.25, 100, 5, 1, 2, 0.5, "standard") == \
            pytest.approx(base + 0.25)

    def test_rejects_bad_sigma2(self):
        with pytest.raises(DomainError):
            bic(0.1, 100, 5, 0, 2, 0.0)

    def test_rejects_unknown_variant(self):
        with pytest.raises(DomainError):
            bic(0.1, 100, 5, 0, 2, 1.0, variant="weird")


class TestSelectGroups:
    def build_clustered_panel(self, seed=0):
        return random_panel(
            60, 5, seed=seed,
            group_profiles=np.array([[4.0] * 5, [0.0] * 5]),
            labels=np.arange(60) % 2, noise_sd=0.3)

    def test_selects_the_visible_two_groups(self):
        panel = self.build_clustered_panel()
        scan = select_groups(panel, TREAT_ONLY, range(1, 5), G_max=5,
                             restarts=10, seed=0)
        assert scan.selected_steep == 2
        assert scan.g_values == (1, 2, 3, 4)

    def test_objectives_nested_over_g(self):
        panel = self.build_clustered_panel(seed=1)
        scan = select_groups(panel, TREAT_ONLY, range(1, 6), G_max=6,
                             restarts=5, seed=0)
        assert np.all(np.diff(scan.objectives) <= 1e-9)

    def test_sigma2_is_gmax_objective(self):
        panel = self.build_clustered_panel(seed=2)
        scan = select_groups(panel, TREAT_ONLY, range(1, 4), G_max=6,
                             restarts=5, seed=0)
        gmax_fit = gfe_fit(panel, TREAT_ONLY, 6, restarts=5, seed=0,
                           warm_starts=())
        # the scan's G_max fit may use a warm start, so allow it to be
        # at least as good as the cold fit
        assert scan.sigma2_hat <= gmax_fit.objective + 1e-12

    def test_criteria_equal_objective_plus_penalty(self):
        panel = self.build_clustered_panel(seed=3)
        scan = select_groups(panel, TREAT_ONLY, (1, 2, 3), G_max=3,
                             restarts=5, seed=0)
        for i, g in enumerate(scan.g_values):
            assert scan.criteria_standard[i] == pytest.approx(
                scan.objectives[i] + scan.penalties_standard[i])
            assert scan.penalties_steep[i] == pytest.approx(
                bic(0.0, 60, 5, 1, g, scan.sigma2_hat, "steep"))

    def test_outcome_scaling_leaves_argmins_unchanged(self):
        panel = self.build_clustered_panel(seed=4)
        scaled = PanelDataset(
            unit=panel.unit, period=panel.period,
            outcome=3.0 * panel.outcome, treatment=panel.treatment,
            covariates=np.zeros((panel.n_rows, 0)))
        a = select_groups(panel, TREAT_ONLY, range(1, 5), G_max=5,
                          restarts=8, seed=0)
        b = select_groups(scaled, TREAT_ONLY, range(1, 5), G_max=5,
                          restarts=8, seed=0)
        assert a.selected_standard == b.selected_standard
        assert a.selected_steep == b.selected_steep

    def test_gmax_must_cover_range(self):
        panel = self.build_clustered_panel(seed=5)
        with pytest.raises(PreconditionError):
            select_groups(panel, TREAT_ONLY, (1, 2, 6), G_max=4)


class TestGroupFlow:
    def test_counts_partition_units(self):
        panel = random_panel(30, 4, seed=10,
                             group_profiles=np.array([[2.0] * 4,
                                                      [-2.0] * 4]),
                             labels=np.arange(30) % 2, noise_sd=0.2)
        f2 = gfe_fit(panel, TREAT_ONLY, 2, restarts=10, seed=0)
        f3 = gfe_fit(panel, TREAT_ONLY, 3, restarts=10, seed=0)
        ((ga, gb), table), = group_flow([f2, f3])
        assert (ga, gb) == (2, 3)
        assert table.sum() == 30
        assert np.array_equal(table.sum(axis=1),
                              np.bincount(f2.labels, minlength=3)[1:])

    def test_needs_two_fits(self):
        panel = random_panel(10, 3, seed=11)
        fit = gfe_fit(panel, TREAT_ONLY, 2, restarts=5, seed=0)
        with pytest.raises(PreconditionError):
            group_flow([fit])


class TestProfileRegression:
    def test_recovers_linear_link(self):
        rng = np.random.default_rng(12)
        panel = random_panel(50, 6, seed=12,
                             group_profiles=np.array([[1.0] * 6,
                                                      [3.0] * 6]),
                             labels=np.arange(50) % 2, noise_sd=0.1)
        fit = gfe_fit(panel, TREAT_ONLY, 2, restarts=10, seed=0)
        behavior = 2.0 * fit.profiles[fit.labels - 1].ravel() \
            + rng.normal(0, 0.05, panel.n_rows)
        reg = profile_regression(behavior, fit, panel)
        assert reg.coefficient("profile") == pytest.approx(2.0, abs=0.05)
        assert "const" in reg.names

    def test_unit_fe_variant_demeans(self):
        panel = random_panel(40, 5, seed=13,
                             group_profiles=np.array([[0.5] * 5,
                                                      [1.5] * 5]),
                             labels=np.arange(40) % 2, noise_sd=0.1)
        fit = gfe_fit(panel, TREAT_ONLY, 2, restarts=10, seed=0)
        behavior = panel.outcome
        reg = profile_regression(behavior, fit, panel, with_unit_fe=True)
        assert "const" not in reg.names
