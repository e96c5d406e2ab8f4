"""Simulated method of moments for the behavioural model.

The objective solves both groups' policies (group 1 with beta1, group
2 with beta2, everything else shared), simulates diagnosis-rate
trajectories with a fixed shock seed, and returns the weighted mean of
squared gaps to the target moments. Because the simulation draws are
common across candidate parameters, the objective is a deterministic
function and can be handed to the optimizers: a simulated-annealing
pass for global search, then a Nelder-Mead simplex for refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .behavioral import (
    BehavioralParams,
    Grid,
    model_moments,
    simulate_trajectories,
    solve_policy,
)
from .errors import (
    DomainError,
    GfekitError,
    ParseError,
    PreconditionError,
    SolverError,
)
from .util import seed_list

PARAM_NAMES = ("beta1", "beta2", "delta", "a", "b", "c", "psi",
               "sigma_eps", "zeta", "kappa")

DEFAULT_BOUNDS = {
    "beta1": (1e-3, 1.5),
    "beta2": (1e-3, 1.5),
    "delta": (0.5, 1.0),
    "a": (1e-3, 2.0),
    "b": (0.0, 2.0),
    "c": (-0.5, 0.5),
    "psi": (0.0, 0.999),
    "sigma_eps": (1e-3, 3.0),
    "zeta": (0.0, 2.0),
    "kappa": (0.0, 10.0),
    "sigma_eta": (1e-3, 3.0),
}

KAPPA_NOTE = ("kappa is applied as a latent threshold: a path counts as "
              "diagnosed once its running-maximum mental health exceeds "
              "kappa (per-period variant via moment_mode='current'). "
              "This observation mapping is a reconstruction.")


@dataclass(frozen=True)
class MomentTarget:
    """Target diagnosis rates, one row per group, one column per age."""

    values: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise PreconditionError("target moments must be a 2-D matrix")
        if np.any(values < 0) or np.any(values > 1):
            raise DomainError("target rates must lie in [0, 1]")
        weights = self.weights
        weights = np.ones_like(values) if weights is None else \
            np.asarray(weights, dtype=float)
        if weights.shape != values.shape:
            raise PreconditionError("weights must match the target shape")
        if np.any(weights <= 0):
            raise DomainError("weights must be positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)


def load_moment_target(path) -> MomentTarget:
    """Read a delimited target file: group rows by age columns.

    The first row is a header; a leading non-numeric column per row is
    treated as a group label and skipped.
    """
    rows = []
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if len(lines) < 2:
        raise ParseError(f"{path}: expected a header and data rows")
    for lineno, line in enumerate(lines[1:], start=2):
        cells = [c.strip() for c in line.split(",")]
        try:
            float(cells[0])
        except ValueError:
            cells = cells[1:]
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}", line=lineno)
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise ParseError(f"{path}: ragged rows {sorted(lengths)}")
    return MomentTarget(values=np.array(rows))


def bundled_target_path():
    """Path of the packaged default target file.

    The file holds coordinates read off a published chart by hand
    (digitised), so it is an approximation of the original series.
    """
    from importlib.resources import files

    return str(files("gfekit.data") / "moment_targets_digitized.csv")


@dataclass(frozen=True)
class SmmConfig:
    """Estimation settings: free parameters, bounds, optimizer budgets.

    The simulation seed is part of the configuration on purpose: it is
    held fixed across objective evaluations (common random numbers), so
    the objective is deterministic in the candidate parameters.
    """

    free: tuple = PARAM_NAMES
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    sa_t0: float = 1000.0
    sa_reduction: float = 0.8
    sa_inner: int = 200
    sa_tmin: float = 1e-6
    sa_stall: int = 5
    nm_diameter: float = 1e-8
    nm_max_evals: int = 2000
    n_paths: int = 10000
    sim_seed: int = 0
    moment_mode: str = "ever"

    def __post_init__(self):
        if not self.free:
            raise PreconditionError("at least one parameter must be free")
        for name in self.free:
            if name not in self.bounds:
                raise PreconditionError(f"no bounds for free param '{name}'")
            lo, hi = self.bounds[name]
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise PreconditionError(f"bad bounds for '{name}'")
        if self.moment_mode not in ("ever", "current"):
            raise PreconditionError(
                f"unknown moment mode '{self.moment_mode}'")


def smm_objective(params: BehavioralParams, target: MomentTarget,
                  config: SmmConfig, grid: Grid):
    """Weighted mean squared gap between model and target moments.

    Returns +inf (and no exception) when the solver fails, so the
    optimizers treat the candidate as a rejected move.
    """
    horizon = target.values.shape[1]
    try:
        policy1 = solve_policy(params, params.beta1, grid)
        policy2 = solve_policy(params, params.beta2, grid)
        traj = [
            simulate_trajectories(policy1, params, n_paths=config.n_paths,
                                  seed=seed_list(config.sim_seed, 1),
                                  horizon=horizon),
            simulate_trajectories(policy2, params, n_paths=config.n_paths,
                                  seed=seed_list(config.sim_seed, 2),
                                  horizon=horizon),
        ]
        moments = model_moments(traj, params.kappa, config.moment_mode)
    except SolverError:
        return math.inf
    gaps = moments - target.values
    w = target.weights
    return float((w * gaps ** 2).sum() / w.sum())


def simulated_moments(params: BehavioralParams, config: SmmConfig,
                      grid: Grid, horizon=8):
    """The model's own moment matrix under the estimation seed."""
    policy1 = solve_policy(params, params.beta1, grid)
    policy2 = solve_policy(params, params.beta2, grid)
    traj = [
        simulate_trajectories(policy1, params, n_paths=config.n_paths,
                              seed=seed_list(config.sim_seed, 1),
                              horizon=horizon),
        simulate_trajectories(policy2, params, n_paths=config.n_paths,
                              seed=seed_list(config.sim_seed, 2),
                              horizon=horizon),
    ]
    return model_moments(traj, params.kappa, config.moment_mode)


@dataclass(frozen=True)
class SaResult:
    x: np.ndarray
    fun: float
    n_evals: int
    trace: np.ndarray            # objective of every evaluation, in order
    best_trace: np.ndarray       # best-so-far after every evaluation
    stopped: str
    n_temperatures: int


def simulated_annealing(fun, x0, bounds, seed=0, t0=1000.0, reduction=0.8,
                        inner=200, tmin=1e-6, stall=5) -> SaResult:
    """Coordinate-wise simulated annealing with adaptive step widths.

    Per temperature level, each free coordinate receives `inner`
    uniform proposals within its current step width; moves are accepted
    by the Metropolis rule. Step widths adapt toward a moderate
    acceptance rate, the temperature is multiplied by `reduction` each
    level, the walk restarts from the best point found so far after
    every level, and the search stops when the temperature falls below
    `tmin` or the best value stagnates for `stall` consecutive levels.
    """
    x0 = np.asarray(x0, dtype=float).copy()
    bounds = np.asarray(bounds, dtype=float)
    lo, hi = bounds[:, 0], bounds[:, 1]
    if np.any(x0 < lo) or np.any(x0 > hi):
        raise PreconditionError("start point violates the bounds")
    ndim = x0.size
    rng = np.random.default_rng(seed_list(seed, 41))

    x = x0.copy()
    f = float(fun(x))
    best_x, best_f = x.copy(), f
    step = (hi - lo) / 2.0
    trace, best_trace = [f], [best_f]
    n_evals = 1
    temp = float(t0)
    stagnant = 0
    n_temp = 0
    stopped = "tmin"

    while temp >= tmin:
        accepted = np.zeros(ndim)
        level_best = best_f
        for _ in range(int(inner)):
            for j in range(ndim):
                prop = x.copy()
                prop[j] = np.clip(x[j] + rng.uniform(-step[j], step[j]),
                                  lo[j], hi[j])
                fp = float(fun(prop))
                n_evals += 1
                df = fp - f
                take = df <= 0
                if not take and np.isfinite(df) and temp > 0:
                    take = rng.random() < math.exp(-min(df / temp, 700.0))
                if take:
                    x, f = prop, fp
                    accepted[j] += 1
                if fp < best_f:
                    best_x, best_f = prop.copy(), fp
                trace.append(fp)
                best_trace.append(best_f)
        ratio = accepted / max(int(inner), 1)
        grow = ratio > 0.6
        shrink = ratio < 0.4
        step[grow] *= 1.0 + 2.0 * (ratio[grow] - 0.6) / 0.4
        step[shrink] /= 1.0 + 2.0 * (0.4 - ratio[shrink]) / 0.4
        np.clip(step, 1e-12, hi - lo, out=step)
        temp *= reduction
        n_temp += 1
        # stagnation only counts once the walk itself has settled onto
        # the best point; while the walk still roams (hot phase), keep
        # cooling even if the best value is unchanged
        settled = f - best_f <= 1e-8 * (1.0 + abs(best_f))
        if settled and level_best - best_f < 1e-12:
            stagnant += 1
            if stagnant >= stall:
                stopped = "stall"
                break
        else:
            stagnant = 0
        # each temperature stage restarts from the best point found so
        # far, so the walk cannot drift away from a discovered optimum
        x, f = best_x.copy(), best_f

    return SaResult(x=best_x, fun=best_f, n_evals=n_evals,
                    trace=np.array(trace), best_trace=np.array(best_trace),
                    stopped=stopped, n_temperatures=n_temp)


@dataclass(frozen=True)
class NmResult:
    x: np.ndarray
    fun: float
    n_evals: int
    diameter: float
    converged: bool


def nelder_mead(fun, x0, diameter_tol=1e-8, max_evals=2000,
                initial_scale=0.05) -> NmResult:
    """Nelder-Mead simplex search.

    Coefficients: reflection 1, expansion 2, contraction 0.5,
    shrink 0.5. Stops when the simplex diameter falls below
    `diameter_tol` or the evaluation budget is exhausted. The returned
    point is never worse than the start.
    """
    x0 = np.asarray(x0, dtype=float).copy()
    ndim = x0.size
    h = initial_scale * np.maximum(1.0, np.abs(x0))
    h[h < 1e-12] = 1e-3  # re-inflate a collapsed edge
    if np.any(h <= 0) or not np.all(np.isfinite(h)):
        raise GfekitError("initial simplex is degenerate")

    simplex = [x0.copy()]
    for j in range(ndim):
        v = x0.copy()
        v[j] += h[j]
        simplex.append(v)
    simplex = np.array(simplex)
    fvals = np.array([float(fun(v)) for v in simplex])
    n_evals = ndim + 1

    def diameter(s):
        d = 0.0
        for i in range(len(s)):
            for j in range(i + 1, len(s)):
                d = max(d, float(np.max(np.abs(s[i] - s[j]))))
        return d

    while n_evals < max_evals:
        order = np.argsort(fvals, kind="stable")
        simplex, fvals = simplex[order], fvals[order]
        if diameter(simplex) < diameter_tol:
            break
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]

        xr = centroid + (centroid - worst)
        fr = float(fun(xr))
        n_evals += 1
        if fr < fvals[0]:
            xe = centroid + 2.0 * (centroid - worst)
            fe = float(fun(xe))
            n_evals += 1
            if fe < fr:
                simplex[-1], fvals[-1] = xe, fe
            else:
                simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-1]:
            xc = centroid + 0.5 * (xr - centroid)
        else:
            xc = centroid + 0.5 * (worst - centroid)
        fc = float(fun(xc))
        n_evals += 1
        if fc < min(fr, fvals[-1]):
            simplex[-1], fvals[-1] = xc, fc
            continue
        # shrink toward the best vertex
        for i in range(1, ndim + 1):
            simplex[i] = simplex[0] + 0.5 * (simplex[i] - simplex[0])
            fvals[i] = float(fun(simplex[i]))
        n_evals += ndim

    order = np.argsort(fvals, kind="stable")
    simplex, fvals = simplex[order], fvals[order]
    return NmResult(x=simplex[0], fun=float(fvals[0]), n_evals=n_evals,
                    diameter=diameter(simplex),
                    converged=diameter(simplex) < diameter_tol)


@dataclass(frozen=True)
class SmmFit:
    """Fitted parameters plus everything needed to audit the fit."""

    params: BehavioralParams
    objective: float
    sa: SaResult
    nm: NmResult
    moments: np.ndarray
    target: MomentTarget
    config: SmmConfig
    grid: Grid
    start: np.ndarray
    metadata: dict


def fit_smm(target: MomentTarget, config: SmmConfig, grid: Grid,
            seed=0, base: BehavioralParams = None,
            start=None) -> SmmFit:
    """Simulated annealing followed by Nelder-Mead refinement.

    Fixed (non-free) parameters come from `base`. The start point
    defaults to the base values clipped into the bounds. Bounds are
    enforced inside the objective: the candidate is clamped and a
    quadratic penalty on the excursion is added, which keeps the
    simplex method unconstrained while making out-of-bounds points
    unattractive.
    """
    base = base or BehavioralParams()
    free = tuple(config.free)
    bounds = np.array([config.bounds[name] for name in free], dtype=float)
    lo, hi = bounds[:, 0], bounds[:, 1]

    def decode(x):
        clamped = np.clip(x, lo, hi)
        penalty = float(((x - clamped) ** 2).sum()) * 100.0
        params = replace(base, **dict(zip(free, clamped)))
        return params, penalty

    def objective(x):
        params, penalty = decode(np.asarray(x, dtype=float))
        value = smm_objective(params, target, config, grid)
        return value + penalty

    if start is None:
        start = np.array([getattr(base, name) for name in free])
    start = np.clip(np.asarray(start, dtype=float), lo, hi)

    sa = simulated_annealing(objective, start, bounds, seed=seed,
                             t0=config.sa_t0, reduction=config.sa_reduction,
                             inner=config.sa_inner, tmin=config.sa_tmin,
                             stall=config.sa_stall)
    nm = nelder_mead(objective, sa.x, diameter_tol=config.nm_diameter,
                     max_evals=config.nm_max_evals)
    final_x = np.clip(nm.x, lo, hi)
    final_params, _ = decode(final_x)
    horizon = target.values.shape[1]
    moments = simulated_moments(final_params, config, grid,
                                horizon=horizon)
    metadata = {
        "kappa_convention": KAPPA_NOTE,
        "moment_mode": config.moment_mode,
        "weighting": "weighted mean of squared gaps (identity default)",
        "free_parameters": list(free),
        "common_random_numbers": True,
    }
    return SmmFit(params=final_params, objective=float(nm.fun), sa=sa,
                  nm=nm, moments=moments, target=target, config=config,
                  grid=grid, start=start, metadata=metadata)
