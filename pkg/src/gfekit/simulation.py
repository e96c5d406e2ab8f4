"""Synthetic-panel generator and Monte Carlo study engine.

Three latent groups follow known time profiles. Units are sorted into
groups by an individual index drawn from a standard normal, using the
empirical quantiles that reproduce the configured shares exactly.
Treatment is a per-period Bernoulli draw whose probability is a group
base rate tilted by the current deviation of the group profile from
its time average, which ties treatment timing to the level of the
unobserved heterogeneity. The Monte Carlo engine repeats the draw,
runs a menu of estimators, and aggregates bias, spread, coverage, and
model-selection outcomes.
"""

from __future__ import annotations

import itertools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, PreconditionError, SpecError
from .estimators import DesignSpec, fe_fit, gfe_fit, ols_fit, select_groups
from .panel import PanelDataset, build_design
from .util import seed_list


def profile_curve(g, t):
    """Analytic group profile g evaluated at time t (t may be an array).

    Group 1 is a flat slow trend, groups 2 and 3 are concave and convex
    exponential paths that meet at t = 10.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("profile curves are defined for t >= 0")
    if g == 1:
        out = 0.002 * t
    elif g == 2:
        out = -1.0 + np.exp((t / 10.0) ** 0.5)
    elif g == 3:
        out = -1.0 + np.exp((t / 10.0) ** 1.2)
    else:
        raise DomainError(f"group must be 1, 2, or 3, got {g}")
    return float(out) if out.ndim == 0 else out


def profiles_matrix(n_periods):
    """All three profiles stacked over t = 1..T, shape (3, T)."""
    tt = np.arange(1, n_periods + 1, dtype=float)
    return np.vstack([profile_curve(g, tt) for g in (1, 2, 3)])


@dataclass(frozen=True)
class DgpSpec:
    """Configuration of the synthetic-panel generator.

    `treat_profile_link` scales how much the within-period deviation of
    a group's profile from its own time average tilts that group's
    treatment probability:
    p_it = p_g * (1 + link * (profile_g(t) - mean_t profile_g)),
    clipped to [0, 1]. A positive link makes treatment more likely in
    periods where the unobserved heterogeneity is high, which is what
    creates selection bias for estimators that ignore the grouped
    profiles. `alpha_outcome_loading` controls whether the individual
    index that drives group membership also enters the outcome level.
    """

    n_units: int
    n_periods: int = 10
    n_groups: int = 3
    xi: float = 0.0
    shares: tuple = (0.70, 0.20, 0.10)
    treat_probs: tuple = (0.0, 0.025, 0.008)
    treat_profile_link: float = 0.32
    noise_sd: float = 0.25
    alpha_sd: float = 1.0
    alpha_outcome_loading: float = 0.0
    lag_coefs: tuple = ()
    seed: object = 0

    def validate(self):
        if self.n_groups != 3:
            raise SpecError("the generator defines exactly 3 profile curves")
        if len(self.shares) != 3 or len(self.treat_probs) != 3:
            raise SpecError("shares and treat_probs need one entry per group")
        if abs(sum(self.shares) - 1.0) > 1e-9:
            raise SpecError(f"shares sum to {sum(self.shares)}, not 1")
        if any(p < 0 or p > 1 for p in self.treat_probs):
            raise SpecError("treatment probabilities must lie in [0, 1]")
        if self.noise_sd < 0 or self.alpha_sd < 0:
            raise SpecError("standard deviations must be non-negative")
        counts = self.group_counts()
        if any(c < 1 for c in counts):
            raise SpecError(f"N={self.n_units} yields empty groups {counts}")
        if self.lag_coefs and self.n_periods <= len(self.lag_coefs):
            raise SpecError("need more periods than lag coefficients")
        if self.n_periods < 1 or self.n_units < 1:
            raise SpecError("n_units and n_periods must be positive")

    def group_counts(self):
        """Integer group sizes from cumulative rounding of the shares."""
        n = self.n_units
        cum = np.round(np.cumsum(self.shares) * n).astype(int)
        counts = np.diff(np.r_[0, cum])
        counts[-1] = n - counts[:-1].sum()
        return tuple(int(c) for c in counts)


@dataclass(frozen=True)
class SimDraw:
    """One simulated panel plus the latent quantities that built it."""

    panel: PanelDataset
    labels: np.ndarray          # true group of each unit, 1..3
    profiles: np.ndarray        # (3, T) analytic profiles on t = 1..T
    alpha: np.ndarray           # (N,) individual index
    noise: np.ndarray           # (N, T) outcome disturbances
    spec: DgpSpec


def simulate_dgp(spec: DgpSpec) -> SimDraw:
    """Draw one panel from the generator.

    The individual index alpha_i ~ N(0, alpha_sd^2) determines group
    membership through its rank: the lowest 70 percent of units form
    group 1, the next 20 percent group 2, the top 10 percent group 3
    (exact counts by cumulative rounding). Treatment is Bernoulli with
    the profile-tilted probabilities described on DgpSpec. The outcome
    adds the treatment effect, distributed lag terms when configured,
    the group profile, optionally the individual index, and noise.
    """
    spec.validate()
    n, t = spec.n_units, spec.n_periods
    rng = np.random.default_rng(seed_list(spec.seed))

    alpha = rng.normal(0.0, spec.alpha_sd, size=n)
    counts = spec.group_counts()
    order = np.argsort(alpha, kind="stable")
    labels0 = np.empty(n, dtype=int)
    stop = np.cumsum(counts)
    start = np.r_[0, stop[:-1]]
    for g in range(3):
        labels0[order[start[g]:stop[g]]] = g

    prof = profiles_matrix(t)
    dev = prof - prof.mean(axis=1, keepdims=True)
    base = np.asarray(spec.treat_probs)[labels0][:, None]
    p_it = base * (1.0 + spec.treat_profile_link * dev[labels0])
    p_it = np.clip(p_it, 0.0, 1.0)
    treatment = (rng.random((n, t)) < p_it).astype(float)

    noise = rng.normal(0.0, spec.noise_sd, size=(n, t))
    outcome = spec.xi * treatment + prof[labels0] + noise
    if spec.alpha_outcome_loading != 0.0:
        outcome = outcome + spec.alpha_outcome_loading * alpha[:, None]
    for lag, coef in enumerate(spec.lag_coefs, start=1):
        shifted = np.zeros_like(treatment)
        shifted[:, lag:] = treatment[:, :-lag]
        outcome = outcome + coef * shifted

    panel = PanelDataset(
        unit=np.repeat(np.arange(1, n + 1), t),
        period=np.tile(np.arange(1, t + 1), n),
        outcome=outcome.ravel(),
        treatment=treatment.ravel(),
        covariates=np.zeros((n * t, 0)),
    )
    return SimDraw(panel=panel, labels=labels0 + 1, profiles=prof,
                   alpha=alpha, noise=noise, spec=spec)


def simulate_dgp_lagged(spec: DgpSpec) -> SimDraw:
    """Draw a panel whose outcome carries distributed treatment lags."""
    if not spec.lag_coefs:
        raise SpecError("lagged generator needs non-empty lag_coefs")
    if spec.n_periods <= 5:
        raise SpecError("lagged generator needs more than 5 periods")
    return simulate_dgp(spec)


def bias_study_spec(n_units=2000, seed=0, **overrides):
    """Default configuration of the coefficient-bias study."""
    return replace(DgpSpec(n_units=n_units, seed=seed), **overrides)


def lag_study_spec(n_units=2000, seed=0, **overrides):
    """Configuration of the misspecified-dynamics study.

    Treatment is common enough, and noise low enough, that clusters of
    treated trajectories become visible to the grouped estimator when
    it is given more groups than the truth.
    """
    base = DgpSpec(n_units=n_units, xi=0.2, lag_coefs=(0.1,) * 5,
                   treat_probs=(0.0, 0.3, 0.1), noise_sd=0.10, seed=seed)
    return replace(base, **overrides)


def alpha_treatment_correlation(draw: SimDraw):
    """Sample correlation of the profile value and treatment over (i,t)."""
    prof_it = draw.profiles[draw.labels - 1]
    a = prof_it.ravel()
    b = draw.panel.treatment
    return float(np.corrcoef(a, b)[0, 1])


def profile_rmse(estimated, true, return_permutation=False):
    """Root-mean-square profile gap minimised over row permutations."""
    est = np.asarray(estimated, dtype=float)
    tru = np.asarray(true, dtype=float)
    if est.shape != tru.shape:
        raise PreconditionError("profile matrices must share a shape")
    best = None
    best_perm = None
    for perm in itertools.permutations(range(est.shape[0])):
        mse = float(((est[list(perm)] - tru) ** 2).mean())
        if best is None or mse < best:
            best = mse
            best_perm = perm
    rmse = best ** 0.5
    if return_permutation:
        return rmse, best_perm
    return rmse


OLS_SPEC = DesignSpec(regressors=("const", "treatment"))
FE_SPEC = DesignSpec(regressors=("treatment",), period_effects=True)
GFE_SPEC = DesignSpec(regressors=("treatment",))


@dataclass(frozen=True)
class ReplicationRecord:
    rep: int
    xi_hat: dict
    xi_se: dict
    profile_rmse: object = None
    bic_standard: object = None
    bic_steep: object = None


@dataclass(frozen=True)
class SimStudyResult:
    """Replication-level estimates and their aggregates."""

    spec: DgpSpec
    estimator_names: tuple
    records: tuple
    failures: tuple
    g_range: tuple
    options: dict = field(default_factory=dict)

    @property
    def n_completed(self):
        return len(self.records)

    def series(self, name):
        """Per-replication (xi_hat, se) arrays for one estimator."""
        xi = np.array([r.xi_hat[name] for r in self.records])
        se = np.array([r.xi_se[name] for r in self.records])
        return xi, se

    def aggregates(self):
        """Bias, spread, and coverage of nominal 95 percent intervals."""
        out = {}
        true_xi = self.spec.xi
        for name in self.estimator_names:
            xi, se = self.series(name)
            mean = float(xi.mean())
            sd = float(xi.std(ddof=1)) if xi.size > 1 else 0.0
            mcse = sd / max(xi.size, 1) ** 0.5
            cover = float(np.mean(np.abs(xi - true_xi) <= 1.96 * se))
            out[name] = {
                "mean": mean,
                "bias": mean - true_xi,
                "sd": sd,
                "mc_se": mcse,
                "coverage": cover,
            }
        return out

    def bic_selections(self):
        std = [r.bic_standard for r in self.records
               if r.bic_standard is not None]
        steep = [r.bic_steep for r in self.records
                 if r.bic_steep is not None]
        return tuple(std), tuple(steep)

    def modal_selection(self, variant="standard"):
        std, steep = self.bic_selections()
        values = std if variant == "standard" else steep
        if not values:
            return None
        counts = np.bincount(np.asarray(values))
        return int(np.argmax(counts))


def _run_replication(payload):
    """One Monte Carlo replication; module level so it pickles."""
    spec_dict, rep, opts = payload
    spec = DgpSpec(**spec_dict)
    rep_spec = replace(spec, seed=tuple(seed_list(spec.seed, 101, rep)))
    try:
        draw = simulate_dgp(rep_spec)
        panel = draw.panel
        xi_hat, xi_se = {}, {}
        rmse = None
        if "ols" in opts["estimators"]:
            fit = ols_fit(build_design(panel, OLS_SPEC))
            xi_hat["ols"], xi_se["ols"] = fit.xi_hat, fit.xi_se
        if "fe" in opts["estimators"]:
            fit = fe_fit(panel, FE_SPEC)
            xi_hat["fe"], xi_se["fe"] = fit.xi_hat, fit.xi_se
        if "gfe" in opts["estimators"]:
            for g in opts["g_range"]:
                fit = gfe_fit(panel, GFE_SPEC, g,
                              restarts=opts["gfe_restarts"],
                              seed=seed_list(spec.seed, 202, rep))
                key = f"gfe{g}"
                xi_hat[key], xi_se[key] = fit.xi_hat, fit.xi_se
                if g == spec.n_groups:
                    rmse = profile_rmse(fit.profiles, draw.profiles)
        sel_std = sel_steep = None
        if opts["bic_scan"]:
            scan = select_groups(panel, GFE_SPEC, opts["bic_g_range"],
                                 G_max=opts["bic_g_max"],
                                 restarts=opts["gfe_restarts"],
                                 seed=seed_list(spec.seed, 303, rep))
            sel_std = scan.selected_standard
            sel_steep = scan.selected_steep
        return ("ok", ReplicationRecord(
            rep=rep, xi_hat=xi_hat, xi_se=xi_se, profile_rmse=rmse,
            bic_standard=sel_std, bic_steep=sel_steep))
    except Exception as exc:  # noqa: BLE001 - failures are data here
        return ("fail", (rep, f"{type(exc).__name__}: {exc}"))


def resolve_workers(workers=None):
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("GFEKIT_WORKERS", "")
    if env.strip():
        try:
            return max(1, int(env))
        except ValueError:
            raise SpecError(f"GFEKIT_WORKERS='{env}' is not an integer")
    return 1


def run_monte_carlo(spec: DgpSpec, replications, estimators=("ols", "fe",
                    "gfe"), G_range=(2, 3, 4, 5), gfe_restarts=15,
                    bic_scan=False, bic_G_range=tuple(range(1, 11)),
                    bic_G_max=10, workers=None) -> SimStudyResult:
    """Repeat the draw-and-estimate cycle and collect the results.

    Replication r uses an RNG stream keyed by (spec.seed, r), so the
    result is identical whether replications run serially or in a
    process pool. Failed replications are recorded with their error and
    excluded from the aggregates.
    """
    if replications < 1:
        raise PreconditionError("replications must be >= 1")
    spec.validate()
    opts = {
        "estimators": tuple(estimators),
        "g_range": tuple(int(g) for g in G_range),
        "gfe_restarts": gfe_restarts,
        "bic_scan": bool(bic_scan),
        "bic_g_range": tuple(int(g) for g in bic_G_range),
        "bic_g_max": int(bic_G_max),
    }
    spec_dict = {f: getattr(spec, f) for f in spec.__dataclass_fields__}
    payloads = [(spec_dict, rep, opts) for rep in range(replications)]

    n_workers = resolve_workers(workers)
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            raw = list(pool.map(_run_replication, payloads))
    else:
        raw = [_run_replication(p) for p in payloads]

    records, failures = [], []
    for status, value in raw:
        if status == "ok":
            records.append(value)
        else:
            failures.append(value)

    names = []
    if "ols" in opts["estimators"]:
        names.append("ols")
    if "fe" in opts["estimators"]:
        names.append("fe")
    if "gfe" in opts["estimators"]:
        names.extend(f"gfe{g}" for g in opts["g_range"])

    return SimStudyResult(
        spec=spec, estimator_names=tuple(names), records=tuple(records),
        failures=tuple(failures), g_range=opts["g_range"], options=opts,
    )
