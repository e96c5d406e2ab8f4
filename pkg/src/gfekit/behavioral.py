"""Finite-horizon decision model with quasi-hyperbolic discounting.

An agent chooses a risky-behaviour intensity rho on a 21-point lattice
each period. Utility is CRRA in rho with a curvature that worsens as
latent mental health M rises, minus a quadratic health cost; M follows
an AR(1) law pushed up by rho. The agent discounts the future with
beta * delta one step ahead and delta thereafter and is sophisticated:
she anticipates that her future selves apply the same beta again. The
solver runs backward induction on an M grid, taking expectations by
Monte Carlo with common random numbers and interpolating continuation
values with monotone cubic Hermite splines.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.stats import norm

from .errors import DomainError, SolverError
from .util import seed_list

RHO_LATTICE = np.round(np.arange(21) * 0.05, 10)
UTILITY_FLOOR = -1e10


@dataclass(frozen=True)
class BehavioralParams:
    """Model parameters, defaulting to the fitted application values.

    beta1/beta2 are the present-bias factors of the two agent groups,
    delta the exponential discount factor. a, b, c shape flow utility
    (baseline curvature, health cost weight, health-curvature slope).
    psi, zeta, sigma_eps drive the mental-health law of motion, and
    sigma_eta scales noise in the link from rho to the probability of
    an abortion. kappa is the latent threshold above which a diagnosis
    is observed; that mapping is a reconstruction, flagged in outputs.
    """

    beta1: float = 1.021
    beta2: float = 0.598
    delta: float = 0.925
    a: float = 0.864
    b: float = 0.186
    c: float = 0.058
    psi: float = 0.962
    zeta: float = 0.447
    sigma_eps: float = 0.613
    sigma_eta: float = 1.0
    kappa: float = 2.543

    def __post_init__(self):
        if not (0.0 < self.delta <= 1.0):
            raise DomainError("delta must lie in (0, 1]")
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise DomainError("present-bias factors must be positive")
        if self.sigma_eps < 0:
            raise DomainError("sigma_eps must be non-negative")
        if self.sigma_eta <= 0:
            raise DomainError("sigma_eta must be positive")


@dataclass(frozen=True)
class Grid:
    """Discretisation settings for the solver.

    The mental-health axis gets `n_m_levels` equidistant points between
    bounds found by simulating `bound_paths` trajectories at the two
    extreme policies. The choice axis is always the 21-point lattice
    0, 0.05, ..., 1. Expectations average over `mc_draws` shock draws
    shared across all grid cells and periods.
    """

    n_m_levels: int = 200
    t_solve: int = 100
    mc_draws: int = 1000
    bound_paths: int = 1000
    seed: int = 0

    @property
    def rho(self):
        return RHO_LATTICE.copy()


@dataclass(frozen=True)
class PolicySolution:
    """Backward-induction output for one present-bias factor.

    rho_star[t-1, j] is the decision at time t on grid node j (a
    lattice value); f_values[t-1, j] is the continuation value F_t,
    with F at the final time identically zero.
    """

    m_grid: np.ndarray
    rho_star: np.ndarray
    f_values: np.ndarray
    beta: float
    params: BehavioralParams
    grid: Grid
    diagnostics: dict

    def f_interpolant(self, t):
        return PchipInterpolator(self.m_grid, self.f_values[t - 1])


def flow_utility(rho, M, params: BehavioralParams):
    """Per-period utility sgn(e) * rho^e - b M^2 with e = 1 - a - c M.

    At rho = 0 with a negative exponent the power term diverges, so the
    function returns the finite floor -1e10 there; the maximisation
    then simply never selects rho = 0 at such health levels. At e = 0
    the power term is zero by the sgn convention. Utility is increasing
    in rho for either sign of e (for e < 0 the term -rho^e climbs from
    the floor toward -1).
    """
    rho_arr, m_arr = np.broadcast_arrays(np.asarray(rho, dtype=float),
                                         np.asarray(M, dtype=float))
    e = 1.0 - params.a - params.c * m_arr
    with np.errstate(divide="ignore"):
        power = np.power(rho_arr, e)
    out = np.sign(e) * power - params.b * m_arr ** 2
    out = np.where((rho_arr == 0.0) & (e < 0.0), UTILITY_FLOOR, out)
    if out.ndim == 0:
        return float(out)
    return out


def mh_transition(M, rho, eps_draw, params: BehavioralParams):
    """Mental-health law of motion psi * M + zeta * rho + eps."""
    return params.psi * np.asarray(M, dtype=float) \
        + params.zeta * np.asarray(rho, dtype=float) \
        + np.asarray(eps_draw, dtype=float)


def abortion_prob(rho, params: BehavioralParams):
    """Probability that rho plus Gaussian noise crosses zero.

    Diagnostic link only; it does not feed back into the solved policy.
    """
    return norm.cdf(np.asarray(rho, dtype=float) / params.sigma_eta)


def _simulate_bounds(params, grid):
    """Grid bounds from trajectories at the two constant policies."""
    rng = np.random.default_rng(seed_list(grid.seed, 11))
    lo, hi = np.inf, -np.inf
    for rho_const in (0.0, 1.0):
        m = np.zeros(grid.bound_paths)
        lo = min(lo, 0.0)
        hi = max(hi, 0.0)
        eps = rng.normal(0.0, params.sigma_eps,
                         size=(grid.t_solve, grid.bound_paths))
        for t in range(grid.t_solve):
            m = params.psi * m + params.zeta * rho_const + eps[t]
            lo = min(lo, float(m.min()))
            hi = max(hi, float(m.max()))
    if hi - lo < 1e-8:
        lo, hi = lo - 1.0, hi + 1.0
    return lo, hi


def _pchip_eval(coeffs, idx, dx):
    """Evaluate a PCHIP piecewise polynomial at precomputed positions.

    `idx` are interval indices and `dx` offsets from the left knot;
    both can be computed once because the evaluation points never
    change across backward-induction steps.
    """
    c0, c1, c2, c3 = (coeffs[k] for k in range(4))
    return ((c0[idx] * dx + c1[idx]) * dx + c2[idx]) * dx + c3[idx]


def _solve_on_grid(params, beta, grid, m_grid, eps_mc):
    n_m = m_grid.size
    rho = RHO_LATTICE
    t_solve = grid.t_solve

    m_next = params.psi * m_grid[:, None, None] \
        + params.zeta * rho[None, :, None] + eps_mc[None, None, :]
    np.clip(m_next, m_grid[0], m_grid[-1], out=m_next)
    flat = m_next.ravel()
    idx = np.clip(np.searchsorted(m_grid, flat, side="right") - 1,
                  0, n_m - 2)
    dx = flat - m_grid[idx]

    u_mat = flow_utility(rho[None, :], m_grid[:, None], params)
    if not np.all(np.isfinite(u_mat)):
        bad = int(np.argwhere(~np.isfinite(u_mat).all(axis=1))[0, 0])
        raise SolverError(
            f"non-finite utility at grid node {bad} (M={m_grid[bad]:.4f})"
        )

    rho_star = np.empty((t_solve, n_m))
    f_values = np.empty((t_solve, n_m))

    # terminal time: zero continuation value, myopic decision
    f_values[t_solve - 1] = 0.0
    rho_star[t_solve - 1] = rho[np.argmax(u_mat, axis=1)]
    f_next = f_values[t_solve - 1]

    rows = np.arange(n_m)
    for t in range(t_solve - 1, 0, -1):
        spline = PchipInterpolator(m_grid, f_next)
        vals = _pchip_eval(spline.c, idx, dx)
        ef = vals.reshape(n_m, rho.size, eps_mc.size).mean(axis=2)
        objective = u_mat + beta * params.delta * ef
        choice = np.argmax(objective, axis=1)
        f_t = u_mat[rows, choice] + params.delta * ef[rows, choice]
        if not np.all(np.isfinite(f_t)):
            bad = int(np.argwhere(~np.isfinite(f_t))[0, 0])
            raise SolverError(
                f"non-finite value at t={t}, grid node {bad} "
                f"(M={m_grid[bad]:.4f})"
            )
        rho_star[t - 1] = rho[choice]
        f_values[t - 1] = f_t
        f_next = f_t
    return rho_star, f_values


def solve_policy(params: BehavioralParams, beta, grid: Grid = None,
                 terminal_check=False) -> PolicySolution:
    """Backward induction for one group's present-bias factor.

    The decision at each (t, M) maximises flow utility plus
    beta * delta times the expected continuation value; the stored
    continuation value discounts by delta alone, which is what a
    sophisticated agent's future selves deliver. Expectations use one
    set of common random shock draws for every grid cell and period.

    With terminal_check=True the model is re-solved on the same grid
    with twice the horizon and the first eight decision rules are
    compared; the result lands in diagnostics["terminal_check"].
    """
    grid = grid or Grid()
    beta = float(beta)
    if beta <= 0:
        raise DomainError("beta must be positive")
    m_lo, m_hi = _simulate_bounds(params, grid)
    m_grid = np.linspace(m_lo, m_hi, grid.n_m_levels)
    rng = np.random.default_rng(seed_list(grid.seed, 12))
    eps_mc = rng.normal(0.0, params.sigma_eps, size=grid.mc_draws)

    rho_star, f_values = _solve_on_grid(params, beta, grid, m_grid, eps_mc)
    diagnostics = {"m_lo": m_lo, "m_hi": m_hi, "terminal_check": None}

    if terminal_check:
        long_grid = replace(grid, t_solve=grid.t_solve * 2)
        rho_long, _ = _solve_on_grid(params, beta, long_grid, m_grid,
                                     eps_mc)
        horizon = min(8, grid.t_solve)
        diff = np.abs(rho_star[:horizon] - rho_long[:horizon])
        diagnostics["terminal_check"] = {
            "horizon": horizon,
            "max_abs_diff": float(diff.max()),
            "identical": bool(diff.max() == 0.0),
        }

    return PolicySolution(m_grid=m_grid, rho_star=rho_star,
                          f_values=f_values, beta=beta, params=params,
                          grid=grid, diagnostics=diagnostics)


@dataclass(frozen=True)
class TrajectorySet:
    """Simulated paths of (M, rho) over the observation ages."""

    m: np.ndarray           # (n_paths, horizon), M at decision time
    rho: np.ndarray         # (n_paths, horizon), lattice decisions
    m0: float
    seed: object


def simulate_trajectories(policy: PolicySolution, params: BehavioralParams,
                          n_paths=10000, m0=0.0, horizon=8,
                          seed=0) -> TrajectorySet:
    """Run paths forward under the solved decision rule.

    Decisions are looked up at the nearest grid node (they are lattice
    values, so interpolating them would leave the feasible set). Paths
    that wander outside the grid are clipped to the closest node and a
    warning is emitted if that happens.
    """
    if horizon > policy.rho_star.shape[0]:
        raise DomainError("horizon exceeds the solved time range")
    rng = np.random.default_rng(seed_list(seed, 21))
    eps = rng.normal(0.0, params.sigma_eps, size=(horizon, n_paths))
    m_grid = policy.m_grid
    midpoints = 0.5 * (m_grid[1:] + m_grid[:-1])

    m = np.full(n_paths, float(m0))
    m_out = np.empty((n_paths, horizon))
    rho_out = np.empty((n_paths, horizon))
    clipped = 0
    for t in range(1, horizon + 1):
        clipped += int(np.sum((m < m_grid[0]) | (m > m_grid[-1])))
        nodes = np.searchsorted(midpoints, m)
        rho_t = policy.rho_star[t - 1, nodes]
        m_out[:, t - 1] = m
        rho_out[:, t - 1] = rho_t
        m = params.psi * m + params.zeta * rho_t + eps[t - 1]
    if clipped:
        warnings.warn(
            f"{clipped} path-periods fell outside the solved grid and "
            f"used the nearest node", stacklevel=2,
        )
    return TrajectorySet(m=m_out, rho=rho_out, m0=float(m0), seed=seed)


def model_moments(trajectories, kappa, mode="ever"):
    """Diagnosis rates by group and age from latent trajectories.

    mode="ever" (default) counts a path as diagnosed from the first age
    its running-maximum M exceeds kappa, mirroring an absorbing
    observed outcome. mode="current" uses the contemporaneous M only.
    """
    if mode not in ("ever", "current"):
        raise DomainError(f"unknown moment mode '{mode}'")
    rows = []
    for traj in trajectories:
        m = traj.m
        level = np.maximum.accumulate(m, axis=1) if mode == "ever" else m
        rows.append((level > kappa).mean(axis=0))
    return np.vstack(rows)


def group_moment_series(params: BehavioralParams, grid: Grid,
                        n_paths=10000, seed=0, moment_mode="ever",
                        include_counterfactual=False, horizon=8):
    """Moments for both groups, optionally with a no-bias counterfactual.

    Group 1 uses beta1, group 2 uses beta2. The counterfactual re-solves
    group 2's problem with beta1 (all other parameters held fixed) and
    simulates it with group 2's own shock stream, isolating the effect
    of removing the extra present bias.
    """
    policy1 = solve_policy(params, params.beta1, grid)
    policy2 = solve_policy(params, params.beta2, grid)
    traj1 = simulate_trajectories(policy1, params, n_paths=n_paths,
                                  seed=seed_list(seed, 1), horizon=horizon)
    traj2 = simulate_trajectories(policy2, params, n_paths=n_paths,
                                  seed=seed_list(seed, 2), horizon=horizon)
    moments = model_moments([traj1, traj2], params.kappa, moment_mode)
    out = {"low": moments[0], "high": moments[1]}
    if include_counterfactual:
        traj_cf = simulate_trajectories(policy1, params, n_paths=n_paths,
                                        seed=seed_list(seed, 2),
                                        horizon=horizon)
        cf = model_moments([traj_cf], params.kappa, moment_mode)
        out["high_nobias"] = cf[0]
    return out
