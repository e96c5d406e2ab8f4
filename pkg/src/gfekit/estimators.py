"""Pooled OLS, within fixed effects, and the grouped fixed-effects
estimator with time-varying group profiles.

The grouped estimator alternates a nearest-profile assignment of units
to groups with an exact joint least-squares refit of the slope vector
and the group-by-period intercepts, over many random restarts. Group
count selection is done by scanning G and scoring two Bayesian
information criteria that differ in how steeply they penalise extra
groups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DomainError,
    NoWithinVariationError,
    PreconditionError,
    SchemaError,
    SingularDesignError,
)
from .panel import (
    BuiltDesign,
    ClusteredCov,
    DesignSpec,
    PanelDataset,
    _dependent_set,
    build_design,
    clustered_covariance,
)
from .util import seed_list


@dataclass(frozen=True)
class LinearFit:
    """A least-squares fit: coefficients, residuals, covariance.

    `objective` is the sum of squared residuals divided by the number
    of rows, i.e. the mean squared residual of the estimation sample
    (which is the transformed sample for within-type estimators).
    """

    coefficients: np.ndarray
    names: tuple
    residuals: np.ndarray
    cov: ClusteredCov
    objective: float
    treatment_ix: object = None

    @property
    def xi_hat(self):
        if self.treatment_ix is None:
            raise SchemaError("fit has no treatment column")
        return float(self.coefficients[self.treatment_ix])

    @property
    def xi_se(self):
        if self.treatment_ix is None:
            raise SchemaError("fit has no treatment column")
        return float(self.cov.se()[self.treatment_ix])

    def coefficient(self, name):
        return float(self.coefficients[self.names.index(name)])


@dataclass(frozen=True)
class GfeFit(LinearFit):
    """Grouped fixed-effects fit.

    `labels` holds the group of each unit in 1..G, ordered like the
    panel's sorted unit ids. `profiles` is the G x T matrix of
    group-by-period intercepts, rows ordered so the last-period value
    is non-decreasing. When the fit used the demeaned variant,
    `profiles_presentation` adds the grand mean of the unit means back,
    which is how profiles are usually displayed.
    """

    G: int = 1
    labels: np.ndarray = None
    profiles: np.ndarray = None
    profiles_presentation: np.ndarray = None
    units: np.ndarray = None
    restart_objectives: tuple = ()
    restart_iterations: tuple = ()
    iteration_objectives: tuple = ()
    demeaned: bool = False
    converged: bool = True
    seed: object = None


def _rank_checked_lstsq(x, y, names):
    n, p = x.shape
    if p == 0:
        return np.zeros(0), y.astype(float).copy()
    scale = np.abs(x).max(axis=0)
    scale[scale == 0] = 1.0
    rank = np.linalg.matrix_rank(x / scale, tol=1e-10)
    if rank < p:
        raise SingularDesignError("design matrix is rank deficient",
                                  columns=_dependent_set(x, names))
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    return coef, y - x @ coef


def ols_fit(design, outcome=None, cluster_ids=None, names=(),
            extra_params=0, treatment_ix=None):
    """Least squares with cluster-robust covariance.

    `design` may be a BuiltDesign (then the other data arguments are
    taken from it) or a raw regressor matrix.
    """
    if isinstance(design, BuiltDesign):
        outcome = design.outcome
        cluster_ids = design.cluster_ids
        names = design.names
        treatment_ix = design.treatment_ix
        design = design.matrix
    x = np.asarray(design, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    y = np.asarray(outcome, dtype=float).ravel()
    if not names:
        names = tuple(f"x{j}" for j in range(x.shape[1]))
    coef, resid = _rank_checked_lstsq(x, y, names)
    cov = clustered_covariance(resid, x, cluster_ids,
                               extra_params=extra_params, names=names)
    objective = float(resid @ resid / y.size)
    return LinearFit(coefficients=coef, names=tuple(names), residuals=resid,
                     cov=cov, objective=objective, treatment_ix=treatment_ix)


def _demean_by_unit(values, n_units, n_periods):
    w = values.reshape(n_units, n_periods, -1)
    return (w - w.mean(axis=1, keepdims=True)).reshape(values.shape)


def fe_fit(panel: PanelDataset, spec: DesignSpec) -> LinearFit:
    """Within (unit-demeaned) least squares on the declared design.

    Equivalent to OLS after subtracting unit means from the outcome and
    every regressor. A regressor with no within-unit variation is
    rejected by name. The absorbed unit means are counted in the
    covariance degrees of freedom.
    """
    if not panel.is_balanced():
        raise PreconditionError("fe_fit requires a balanced panel")
    built = build_design(panel, spec)
    n, t = panel.n_units, panel.n_periods
    x = _demean_by_unit(built.matrix, n, t)
    y = _demean_by_unit(built.outcome, n, t).ravel()
    scale = np.abs(built.matrix).max(axis=0)
    scale[scale == 0] = 1.0
    dead = np.abs(x).max(axis=0) <= 1e-12 * scale
    if np.any(dead):
        raise NoWithinVariationError(built.names[int(np.argmax(dead))])
    coef, resid = _rank_checked_lstsq(x, y, built.names)
    cov = clustered_covariance(resid, x, built.cluster_ids,
                               extra_params=n, names=built.names)
    return LinearFit(coefficients=coef, names=built.names, residuals=resid,
                     cov=cov, objective=float(resid @ resid / y.size),
                     treatment_ix=built.treatment_ix)


def assign_groups(resid_vectors, profiles):
    """Nearest-profile group labels (1..G) for per-unit trajectories.

    label_i = argmin_g sum_t (r_it - alpha_gt)^2, ties resolved toward
    the lowest group index.
    """
    r = np.asarray(resid_vectors, dtype=float)
    a = np.asarray(profiles, dtype=float)
    return _assign(r, a) + 1


def _assign(resid, profiles):
    # squared distance of each unit trajectory to each profile row;
    # argmin returns the first (lowest) index on ties
    d = ((resid[:, None, :] - profiles[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def _refit(x, y, labels, G, n, t):
    """Exact joint least squares given an assignment.

    Group-by-period means are absorbed: slopes come from cell-demeaned
    data, profiles are the cell means of the slope-adjusted outcome.
    """
    cell = labels.repeat(t) * t + np.tile(np.arange(t), n)
    counts = np.bincount(cell, minlength=G * t).astype(float)
    p = x.shape[1]
    if p:
        xm = np.zeros((G * t, p))
        for j in range(p):
            xm[:, j] = np.bincount(cell, weights=x[:, j], minlength=G * t)
        xm /= counts[:, None]
        ym = np.bincount(cell, weights=y, minlength=G * t) / counts
        xt = x - xm[cell]
        yt = y - ym[cell]
        theta, *_ = np.linalg.lstsq(xt, yt, rcond=None)
        adj = y - x @ theta
    else:
        theta = np.zeros(0)
        adj = y
    alpha = (np.bincount(cell, weights=adj, minlength=G * t)
             / counts).reshape(G, t)
    resid = adj - alpha.ravel()[cell]
    obj = float(resid @ resid / y.size)
    return theta, alpha, resid, obj


def _repair_empty(labels, resid_by_unit, G):
    """Move the worst-fit unit into each empty group.

    Only units from groups that keep at least two members are eligible,
    so the repair never creates a new empty group.
    """
    labels = labels.copy()
    ssr = (resid_by_unit ** 2).sum(axis=1)
    for g in range(G):
        if np.any(labels == g):
            continue
        sizes = np.bincount(labels, minlength=G)
        eligible = sizes[labels] >= 2
        if not np.any(eligible):
            break
        candidate = np.argmax(np.where(eligible, ssr, -np.inf))
        labels[candidate] = g
    return labels


def default_restarts(n_units):
    return 100 if n_units <= 2000 else 25


def gfe_fit(panel: PanelDataset, spec: DesignSpec, G, restarts=None,
            max_iter=1000, tol=1e-10, demean=False, seed=0,
            warm_starts=()) -> GfeFit:
    """Grouped fixed-effects estimation at a fixed group count.

    Each restart initialises the profiles with the residual
    trajectories of G distinct randomly drawn units (slopes start at
    the within estimate) and then alternates nearest-profile assignment
    with an exact joint refit until the assignment stops changing or
    the objective improvement falls below `tol`. The best restart by
    objective wins; groups are relabelled so the last-period profile
    values ascend. `warm_starts` accepts extra (profiles, theta)
    initialisations, used by the model-selection scan to nest fits.

    With demean=True the outcome and regressors are unit-demeaned first
    (this absorbs time-constant individual effects; at G=1 it
    reproduces the within estimator).
    """
    if not panel.is_balanced():
        raise PreconditionError("gfe_fit requires a balanced panel")
    if spec.period_effects:
        raise SchemaError("period dummies are collinear with the group "
                          "profiles; drop period_effects for gfe_fit")
    n, t = panel.n_units, panel.n_periods
    G = int(G)
    if G < 1 or G > n:
        raise PreconditionError(f"G={G} outside 1..{n}")
    if restarts is None:
        restarts = default_restarts(n)

    built = build_design(panel, spec)
    x_raw, y_raw = built.matrix, built.outcome.astype(float)
    if demean:
        x = _demean_by_unit(x_raw, n, t)
        y = _demean_by_unit(y_raw, n, t).ravel()
    else:
        x, y = x_raw, y_raw
    p = x.shape[1]

    # starting slope: within estimate on the (possibly demeaned) data
    if p:
        xw = _demean_by_unit(x, n, t)
        yw = _demean_by_unit(y, n, t).ravel()
        theta0, *_ = np.linalg.lstsq(xw, yw, rcond=None)
    else:
        theta0 = np.zeros(0)

    def run(theta_init, alpha_init):
        theta, alpha = theta_init, alpha_init
        prev_labels = None
        prev_obj = math.inf
        trace = []
        converged = False
        labels = None
        resid = None
        for _ in range(max_iter):
            r_unit = (y - x @ theta if p else y).reshape(n, t)
            labels = _assign(r_unit, alpha)
            labels = _repair_empty(labels, r_unit - alpha[labels], G)
            theta, alpha, resid, obj = _refit(x, y, labels, G, n, t)
            trace.append(obj)
            if prev_labels is not None and np.array_equal(labels,
                                                          prev_labels):
                converged = True
                break
            if prev_obj - obj < tol:
                converged = True
                break
            prev_labels, prev_obj = labels, obj
        return labels, theta, alpha, resid, trace, converged

    candidates = []
    for ws in warm_starts:
        alpha_init, theta_init = ws
        alpha_init = np.asarray(alpha_init, dtype=float)
        if alpha_init.shape != (G, t):
            raise PreconditionError("warm start profiles must be G x T")
        th = theta0 if theta_init is None else np.asarray(theta_init)
        candidates.append((th, alpha_init))

    base_resid = (y - x @ theta0 if p else y).reshape(n, t)
    for r in range(int(restarts)):
        rng = np.random.default_rng(seed_list(seed, G, r))
        pick = rng.choice(n, size=G, replace=False)
        candidates.append((theta0, base_resid[pick].copy()))
    if not candidates:
        raise PreconditionError("need restarts >= 1 or a warm start")

    best = None
    restart_objs, restart_iters = [], []
    for theta_init, alpha_init in candidates:
        labels, theta, alpha, resid, trace, conv = run(theta_init,
                                                       alpha_init)
        # the alternation must never increase the objective
        diffs = np.diff(trace)
        if diffs.size and diffs.max() > 1e-9 * max(1.0, trace[0]):
            raise AssertionError("objective increased during iteration")
        restart_objs.append(trace[-1])
        restart_iters.append(len(trace))
        if best is None or trace[-1] < best[0]:
            best = (trace[-1], labels, theta, alpha, resid, trace, conv)

    obj, labels, theta, alpha, resid, trace, conv = best

    # canonical group order: last-period profile value ascending
    order = np.argsort(alpha[:, -1], kind="stable")
    alpha = alpha[order]
    relabel = np.empty(G, dtype=int)
    relabel[order] = np.arange(G)
    labels = relabel[labels]

    presentation = alpha.copy()
    if demean:
        grand = float(y_raw.reshape(n, t).mean())
        presentation = alpha + grand

    if p:
        cell = labels.repeat(t) * t + np.tile(np.arange(t), n)
        counts = np.bincount(cell, minlength=G * t).astype(float)
        xm = np.zeros((G * t, p))
        for j in range(p):
            xm[:, j] = np.bincount(cell, weights=x[:, j], minlength=G * t)
        xm /= counts[:, None]
        x_cell = x - xm[cell]
        extra = G * t + (n if demean else 0)
        cov = clustered_covariance(resid, x_cell, built.cluster_ids,
                                   extra_params=extra, names=built.names)
    else:
        cov = None

    return GfeFit(
        coefficients=theta, names=built.names, residuals=resid, cov=cov,
        objective=obj, treatment_ix=built.treatment_ix, G=G,
        labels=labels + 1, profiles=alpha,
        profiles_presentation=presentation, units=panel.units,
        restart_objectives=tuple(restart_objs),
        restart_iterations=tuple(restart_iters),
        iteration_objectives=tuple(trace), demeaned=bool(demean),
        converged=bool(conv), seed=seed,
    )


def bic(objective, n_units, n_periods, n_covariates, G, sigma2_hat,
        variant="standard"):
    """Information criterion value for a grouped fit.

    standard penalty: sigma2 * (G*T + N + K) / (N*T) * ln(N*T)
    steep penalty:    sigma2 * G * (T + N - G + K) / (N*T) * ln(N*T)
    """
    if not sigma2_hat > 0:
        raise DomainError("sigma2_hat must be positive")
    n, t, k, g = n_units, n_periods, n_covariates, G
    nt = n * t
    log_nt = math.log(nt)
    if variant == "standard":
        penalty = sigma2_hat * (g * t + n + k) / nt * log_nt
    elif variant == "steep":
        penalty = sigma2_hat * g * (t + n - g + k) / nt * log_nt
    else:
        raise DomainError(f"unknown BIC variant '{variant}'")
    return float(objective + penalty)


@dataclass(frozen=True)
class BicScan:
    """Model-selection scan over group counts.

    Stores, per G, the fit objective, both penalties and both criteria
    (criterion = objective + penalty), plus the fits themselves. The
    argmin of each variant is reported with ties broken toward the
    lowest G. Both variants are always reported; the scan never picks
    one for the caller.
    """

    g_values: tuple
    objectives: tuple
    penalties_standard: tuple
    penalties_steep: tuple
    criteria_standard: tuple
    criteria_steep: tuple
    fits: tuple
    sigma2_hat: float
    g_max: int
    n_covariates: int
    selected_standard: int
    selected_steep: int


def select_groups(panel: PanelDataset, spec: DesignSpec, G_range,
                  G_max=10, restarts=None, demean=False, seed=0,
                  max_iter=1000, tol=1e-10) -> BicScan:
    """Fit every G in `G_range`, score both criteria, report argmins.

    The error variance entering both penalties is the mean squared
    residual of the fit at `G_max`. Fits run in ascending G and each
    fit receives the previous solution, extended by the trajectory of
    its worst-fit unit, as one extra initialisation; this guarantees
    the best objective is non-increasing in G.
    """
    g_values = sorted(int(g) for g in G_range)
    if not g_values:
        raise PreconditionError("empty G_range")
    if G_max < g_values[-1]:
        raise PreconditionError("G_max must cover max(G_range)")

    n, t = panel.n_units, panel.n_periods
    x_p = build_design(panel, spec).matrix.shape[1]

    todo = list(g_values)
    if G_max not in todo:
        todo.append(G_max)
    fits = {}
    prev = None
    for g in sorted(todo):
        ws = []
        if prev is not None and prev.G == g - 1:
            ws.append((_grow_profiles(prev, t), prev.coefficients))
        fits[g] = gfe_fit(panel, spec, g, restarts=restarts,
                          max_iter=max_iter, tol=tol, demean=demean,
                          seed=seed, warm_starts=ws)
        prev = fits[g]

    objs = [fits[g].objective for g in g_values]
    for a, b in zip(g_values[:-1], g_values[1:]):
        if b == a + 1 and fits[b].objective > fits[a].objective + 1e-9:
            raise AssertionError(
                f"objective not nested between G={a} and G={b}"
            )

    sigma2 = fits[G_max].objective
    pen_std = [bic(0.0, n, t, x_p, g, sigma2, "standard")
               for g in g_values]
    pen_steep = [bic(0.0, n, t, x_p, g, sigma2, "steep") for g in g_values]
    crit_std = [o + p for o, p in zip(objs, pen_std)]
    crit_steep = [o + p for o, p in zip(objs, pen_steep)]

    return BicScan(
        g_values=tuple(g_values), objectives=tuple(objs),
        penalties_standard=tuple(pen_std),
        penalties_steep=tuple(pen_steep),
        criteria_standard=tuple(crit_std),
        criteria_steep=tuple(crit_steep),
        fits=tuple(fits[g] for g in g_values),
        sigma2_hat=float(sigma2), g_max=int(G_max),
        n_covariates=int(x_p),
        selected_standard=int(g_values[int(np.argmin(crit_std))]),
        selected_steep=int(g_values[int(np.argmin(crit_steep))]),
    )


def _grow_profiles(fit: GfeFit, t):
    """Previous solution plus one profile fitting its worst unit."""
    resid = fit.residuals.reshape(-1, t)
    ssr = (resid ** 2).sum(axis=1)
    worst = int(np.argmax(ssr))
    extra = fit.profiles[fit.labels[worst] - 1] + resid[worst]
    return np.vstack([fit.profiles, extra])


def group_flow(fits):
    """Cross-tabulations of group membership between adjacent fits.

    Returns a list of ((G_a, G_b), table) pairs where table[i, j]
    counts units assigned to group i+1 at G_a and group j+1 at G_b.
    """
    fits = list(fits)
    if len(fits) < 2:
        raise PreconditionError("group_flow needs at least two fits")
    for f in fits[1:]:
        if not np.array_equal(f.units, fits[0].units):
            raise PreconditionError("fits cover different unit sets")
    out = []
    for a, b in zip(fits[:-1], fits[1:]):
        tab = np.zeros((a.G, b.G), dtype=int)
        np.add.at(tab, (a.labels - 1, b.labels - 1), 1)
        out.append(((a.G, b.G), tab))
    return out


def profile_regression(behavior, fit: GfeFit, panel: PanelDataset,
                       extra_regressors=(), with_unit_fe=False):
    """Regress a behaviour series on the assigned profile values.

    The key regressor for row (i, t) is the fitted profile of unit i's
    group at period t. Standard errors are clustered by unit. With
    with_unit_fe=True all columns are unit-demeaned first.
    """
    if not panel.is_balanced():
        raise PreconditionError("profile_regression needs a balanced panel")
    if not np.array_equal(fit.units, panel.units):
        raise PreconditionError("fit and panel cover different units")
    n, t = panel.n_units, panel.n_periods
    y = np.asarray(behavior, dtype=float).ravel()
    if y.size != n * t:
        raise PreconditionError("behavior series does not match the grid")

    prof = fit.profiles[fit.labels - 1]          # (N, T)
    cols = [prof.ravel()]
    names = ["profile"]
    for name in extra_regressors:
        cols.append(panel.column(name))
        names.append(name)
    if not with_unit_fe:
        cols.append(np.ones(n * t))
        names.append("const")
    x = np.column_stack(cols)
    extra = 0
    if with_unit_fe:
        x = _demean_by_unit(x, n, t)
        y = _demean_by_unit(y, n, t).ravel()
        extra = n
    coef, resid = _rank_checked_lstsq(x, y, tuple(names))
    cov = clustered_covariance(resid, x, panel.unit, extra_params=extra,
                               names=tuple(names))
    return LinearFit(coefficients=coef, names=tuple(names),
                     residuals=resid, cov=cov,
                     objective=float(resid @ resid / y.size))
