"""Panel-data container, CSV ingestion, balancing, and design matrices.

The panel is stored in long format, always sorted by (unit, period).
Missing observations are carried as NaN until `balance_panel` replaces
them with zeros and records the gap in two censoring indicators:
`censor_period` marks rows that did not exist in the source data and
`censor_value` marks cells whose value was missing. Balanced panels are
the entry requirement for every estimator in the package.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DomainError,
    DuplicateKeyError,
    EmptyInputError,
    ParseError,
    PreconditionError,
    SchemaError,
    SingularDesignError,
)

MISSING_TOKENS = ("", "NA")


def _as_2d(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    return a


@dataclass(frozen=True)
class PanelDataset:
    """Long-format panel, canonically sorted by (unit, period).

    Columns `outcome` and `treatment` are the modelled variables; any
    number of named covariates ride along in `covariates`. The dataset
    is treated as immutable: operations return new instances.
    """

    unit: np.ndarray
    period: np.ndarray
    outcome: np.ndarray
    treatment: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple = ()
    censor_period: np.ndarray = None
    censor_value: np.ndarray = None

    def __post_init__(self):
        unit = np.asarray(self.unit, dtype=np.int64)
        period = np.asarray(self.period, dtype=np.int64)
        outcome = np.asarray(self.outcome, dtype=float)
        treatment = np.asarray(self.treatment, dtype=float)
        cov = _as_2d(self.covariates) if np.size(self.covariates) else \
            np.zeros((unit.size, 0))
        cp = self.censor_period
        cv = self.censor_value
        cp = np.zeros(unit.size, dtype=np.int8) if cp is None else \
            np.asarray(cp, dtype=np.int8)
        cv = np.zeros(unit.size, dtype=np.int8) if cv is None else \
            np.asarray(cv, dtype=np.int8)
        order = np.lexsort((period, unit))
        object.__setattr__(self, "unit", unit[order])
        object.__setattr__(self, "period", period[order])
        object.__setattr__(self, "outcome", outcome[order])
        object.__setattr__(self, "treatment", treatment[order])
        object.__setattr__(self, "covariates", cov[order])
        object.__setattr__(self, "covariate_names",
                           tuple(self.covariate_names))
        object.__setattr__(self, "censor_period", cp[order])
        object.__setattr__(self, "censor_value", cv[order])
        if cov.shape[1] != len(self.covariate_names):
            raise SchemaError(
                f"{cov.shape[1]} covariate columns but "
                f"{len(self.covariate_names)} names"
            )

    @property
    def n_rows(self):
        return self.unit.size

    @property
    def units(self):
        return np.unique(self.unit)

    @property
    def n_units(self):
        return self.units.size

    @property
    def period_range(self):
        """Contiguous period labels spanned by the data."""
        return np.arange(self.period.min(), self.period.max() + 1)

    @property
    def n_periods(self):
        return self.period_range.size

    def t_index(self):
        """Period mapped to t = 1..T."""
        return self.period - self.period.min() + 1

    def is_balanced(self):
        """True when every unit has one finite row per period."""
        if self.n_rows == 0:
            return False
        if self.n_rows != self.n_units * self.n_periods:
            return False
        expected_u = np.repeat(self.units, self.n_periods)
        expected_p = np.tile(self.period_range, self.n_units)
        if not (np.array_equal(self.unit, expected_u)
                and np.array_equal(self.period, expected_p)):
            return False
        for a in (self.outcome, self.treatment, self.covariates):
            if not np.all(np.isfinite(a)):
                return False
        return True

    def column(self, name):
        """Resolve a canonical column name to its long-format vector."""
        if name == "outcome":
            return self.outcome
        if name == "treatment":
            return self.treatment
        if name == "censor_period":
            return self.censor_period.astype(float)
        if name == "censor_value":
            return self.censor_value.astype(float)
        if name in self.covariate_names:
            j = self.covariate_names.index(name)
            return self.covariates[:, j]
        raise SchemaError(f"unknown column '{name}'")

    def wide(self, name):
        """Column reshaped to an (N, T) matrix. Requires balance."""
        if not self.is_balanced():
            raise PreconditionError("wide() requires a balanced panel")
        return self.column(name).reshape(self.n_units, self.n_periods)


def load_panel(path, schema):
    """Read a delimited text file into an (unbalanced) PanelDataset.

    `schema` maps canonical names to file column headers. Required keys:
    unit, period, outcome, treatment. Optional key `covariates` gives
    either a list of file columns (kept under their own names) or a
    mapping of canonical name to file column. Empty cells and the
    literal "NA" are recorded as missing, not zero.
    """
    for key in ("unit", "period", "outcome", "treatment"):
        if key not in schema:
            raise SchemaError(f"schema is missing required key '{key}'")
    cov_schema = schema.get("covariates", {})
    if isinstance(cov_schema, (list, tuple)):
        cov_schema = {c: c for c in cov_schema}
    cov_names = tuple(cov_schema.keys())

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyInputError(f"{path}: no header row")
        header = [h.strip() for h in header]
        col_ix = {}
        wanted = {"unit": schema["unit"], "period": schema["period"],
                  "outcome": schema["outcome"],
                  "treatment": schema["treatment"]}
        wanted.update(cov_schema)
        for canon, file_col in wanted.items():
            if file_col not in header:
                raise SchemaError(
                    f"schema column '{file_col}' not found in header"
                )
            col_ix[canon] = header.index(file_col)

        units, periods, seen = [], [], set()
        outcome, treatment = [], []
        covs = [[] for _ in cov_names]
        for lineno, row in enumerate(reader, start=2):
            if not row or all(c.strip() == "" for c in row):
                continue
            if len(row) < len(header):
                raise ParseError(
                    f"expected {len(header)} fields, got {len(row)}",
                    line=lineno,
                )

            def cell(canon):
                return row[col_ix[canon]].strip()

            def as_int(canon):
                raw = cell(canon)
                try:
                    return int(raw)
                except ValueError:
                    raise ParseError(
                        f"column '{canon}' value '{raw}' is not an integer",
                        line=lineno,
                    )

            def as_real(canon):
                raw = cell(canon)
                if raw in MISSING_TOKENS:
                    return math.nan
                try:
                    return float(raw)
                except ValueError:
                    raise ParseError(
                        f"column '{canon}' value '{raw}' is not numeric",
                        line=lineno,
                    )

            u, p = as_int("unit"), as_int("period")
            if (u, p) in seen:
                raise DuplicateKeyError(
                    f"duplicate (unit, period) pair ({u}, {p}) "
                    f"at line {lineno}"
                )
            seen.add((u, p))
            units.append(u)
            periods.append(p)
            outcome.append(as_real("outcome"))
            treatment.append(as_real("treatment"))
            for j, name in enumerate(cov_names):
                covs[j].append(as_real(name))

    if not units:
        raise EmptyInputError(f"{path}: no data rows")
    cov_mat = np.column_stack(covs) if cov_names else \
        np.zeros((len(units), 0))
    return PanelDataset(
        unit=np.array(units), period=np.array(periods),
        outcome=np.array(outcome), treatment=np.array(treatment),
        covariates=cov_mat, covariate_names=cov_names,
    )


def balance_panel(panel: PanelDataset) -> PanelDataset:
    """Expand to the full unit-by-period grid with censoring flags.

    Rows absent from the input become all-zero rows with
    censor_period = 1; missing cells in existing rows become 0 with
    censor_value = 1. Observed entries and existing flags are kept, so
    the operation is idempotent.
    """
    if panel.n_rows == 0:
        raise EmptyInputError("cannot balance an empty panel")
    units = panel.units
    period_range = panel.period_range
    n, t = units.size, period_range.size
    u_ix = np.searchsorted(units, panel.unit)
    p_ix = panel.period - period_range[0]
    flat = u_ix * t + p_ix

    def grid(values, fill=0.0):
        out = np.full(n * t, fill, dtype=float)
        out[flat] = values
        return out

    present = np.zeros(n * t, dtype=bool)
    present[flat] = True

    k = len(panel.covariate_names)
    outcome = grid(panel.outcome)
    treatment = grid(panel.treatment)
    covs = np.zeros((n * t, k))
    for j in range(k):
        covs[:, j] = grid(panel.covariates[:, j])

    censor_period = np.zeros(n * t, dtype=np.int8)
    censor_period[flat] = panel.censor_period
    censor_period[~present] = 1
    censor_value = np.zeros(n * t, dtype=np.int8)
    censor_value[flat] = panel.censor_value
    stacked = np.column_stack([outcome, treatment, covs])
    had_nan = ~np.all(np.isfinite(stacked), axis=1)
    censor_value[present & had_nan] = 1
    stacked[~np.isfinite(stacked)] = 0.0

    return PanelDataset(
        unit=np.repeat(units, t),
        period=np.tile(period_range, n),
        outcome=stacked[:, 0],
        treatment=stacked[:, 1],
        covariates=stacked[:, 2:],
        covariate_names=panel.covariate_names,
        censor_period=censor_period,
        censor_value=censor_value,
    )


def make_absorbing(values, unit=None):
    """Cumulative-maximum transform of a binary series.

    Once the series hits 1 it stays 1. With `unit` given, the running
    maximum restarts at each unit boundary (input must be sorted by
    unit, as PanelDataset guarantees).
    """
    values = np.asarray(values, dtype=float)
    if not np.all(np.isin(values, (0.0, 1.0))):
        raise DomainError("make_absorbing requires a 0/1 series")
    if unit is None:
        return np.maximum.accumulate(values)
    unit = np.asarray(unit)
    # the accumulation restarts at the first row of each unit block
    starts = np.flatnonzero(np.r_[True, unit[1:] != unit[:-1]])
    out = values.copy()
    for s, e in zip(starts, np.r_[starts[1:], unit.size]):
        out[s:e] = np.maximum.accumulate(values[s:e])
    return out


def within_transform(panel: PanelDataset, columns) -> PanelDataset:
    """Subtract unit-level means from the selected columns.

    Means are taken over all T periods of the balanced panel, including
    zero-filled censored cells (balance first, demean second).
    """
    if not panel.is_balanced():
        raise PreconditionError("within_transform requires a balanced panel")
    n, t = panel.n_units, panel.n_periods

    def demean(v):
        w = v.reshape(n, t)
        return (w - w.mean(axis=1, keepdims=True)).ravel()

    outcome = panel.outcome
    treatment = panel.treatment
    covs = panel.covariates.copy()
    for name in columns:
        if name == "outcome":
            outcome = demean(outcome)
        elif name == "treatment":
            treatment = demean(treatment)
        elif name in panel.covariate_names:
            j = panel.covariate_names.index(name)
            covs[:, j] = demean(covs[:, j])
        else:
            raise SchemaError(f"unknown column '{name}'")
    return replace(panel, outcome=outcome, treatment=treatment,
                   covariates=covs)


@dataclass(frozen=True)
class DesignSpec:
    """Declarative description of a regression design.

    Regressor tokens: "const", "treatment", a covariate name,
    "censor_period", "censor_value", a period dummy "t==K" (K on the
    t = 1..T index), or an interaction "X*Y" of two such tokens.
    `period_effects` appends the dummies t==2..T; `include_censor_flags`
    appends whichever censoring indicators are non-degenerate. The
    treatment token may appear at most once outside interactions.
    """

    regressors: tuple = ("treatment",)
    treatment: str = "treatment"
    period_effects: bool = False
    absorbing_outcome: bool = False
    include_censor_flags: bool = True
    cluster: str = "unit"


@dataclass(frozen=True)
class BuiltDesign:
    matrix: np.ndarray
    names: tuple
    outcome: np.ndarray
    treatment_ix: object
    cluster_ids: np.ndarray


def _resolve_token(panel, token):
    token = token.strip()
    if token == "const":
        return np.ones(panel.n_rows)
    if token.startswith("t=="):
        try:
            k = int(token[3:])
        except ValueError:
            raise SchemaError(f"bad period dummy '{token}'")
        return (panel.t_index() == k).astype(float)
    if "*" in token:
        left, right = token.split("*", 1)
        return _resolve_token(panel, left) * _resolve_token(panel, right)
    return panel.column(token)


def build_design(panel: PanelDataset, spec: DesignSpec) -> BuiltDesign:
    """Materialise the regressor matrix and outcome for a DesignSpec.

    Column order is the declared regressors, then period dummies, then
    censor flags, so it is deterministic. Rank is not checked here; the
    estimators own that concern.
    """
    names = list(spec.regressors)
    plain_treat = [i for i, s in enumerate(names) if s == spec.treatment]
    if len(plain_treat) > 1:
        raise SchemaError(
            f"treatment '{spec.treatment}' listed more than once"
        )
    if spec.period_effects:
        for k in range(2, panel.n_periods + 1):
            names.append(f"t=={k}")
    if spec.include_censor_flags:
        for flag in ("censor_period", "censor_value"):
            col = panel.column(flag)
            # an identically-zero flag carries no information and would
            # only make the design singular
            if np.any(col != 0) and flag not in names:
                names.append(flag)

    cols = [_resolve_token(panel, s) for s in names]
    matrix = np.column_stack(cols) if cols else np.zeros((panel.n_rows, 0))
    outcome = panel.outcome
    if spec.absorbing_outcome:
        outcome = make_absorbing(outcome, unit=panel.unit)
    treatment_ix = plain_treat[0] if plain_treat else None
    return BuiltDesign(
        matrix=matrix, names=tuple(names), outcome=outcome,
        treatment_ix=treatment_ix, cluster_ids=panel.unit.copy(),
    )


@dataclass(frozen=True)
class ClusteredCov:
    """Cluster-robust covariance of estimated coefficients."""

    matrix: np.ndarray
    n_clusters: int
    dof_factor: float
    names: tuple = ()

    def se(self):
        return np.sqrt(np.clip(np.diag(self.matrix), 0.0, None))


def _dependent_set(x, names):
    """Identify a small linearly dependent column set for error text."""
    from scipy.linalg import qr

    _, r, piv = qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    scale = diag[0] if diag.size and diag[0] > 0 else 1.0
    rank = int(np.sum(diag > 1e-10 * scale))
    if rank >= x.shape[1]:
        return ()
    dep = piv[rank]
    basis = piv[:rank]
    coef, *_ = np.linalg.lstsq(x[:, basis], x[:, dep], rcond=None)
    involved = [names[basis[j]] for j in np.flatnonzero(np.abs(coef) > 1e-8)]
    return tuple(involved + [names[dep]])


def clustered_covariance(residuals, regressors, cluster_ids,
                         extra_params=0, names=()):
    """CR1 sandwich covariance with clusters defined by `cluster_ids`.

    extra_params counts absorbed coefficients (unit means, group-period
    effects) that occupy degrees of freedom but are not columns of
    `regressors`.
    """
    u = np.asarray(residuals, dtype=float).ravel()
    x = _as_2d(regressors)
    cluster_ids = np.asarray(cluster_ids).ravel()
    n, k = x.shape
    if u.size != n or cluster_ids.size != n:
        raise PreconditionError("residuals, regressors, clusters must align")
    clusters, cidx = np.unique(cluster_ids, return_inverse=True)
    g = clusters.size
    if g < 2:
        raise PreconditionError("clustered covariance needs >= 2 clusters")
    if not names:
        names = tuple(f"x{j}" for j in range(k))

    xtx = x.T @ x
    try:
        bread = np.linalg.inv(xtx)
    except np.linalg.LinAlgError:
        raise SingularDesignError("singular design in covariance",
                                  columns=_dependent_set(x, names))
    cond = np.linalg.cond(xtx)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularDesignError("singular design in covariance",
                                  columns=_dependent_set(x, names))

    scores = np.zeros((g, k))
    np.add.at(scores, cidx, x * u[:, None])
    meat = scores.T @ scores
    k_eff = k + extra_params
    denom = max(n - k_eff, 1)
    factor = (g / (g - 1)) * ((n - 1) / denom)
    v = factor * bread @ meat @ bread
    v = 0.5 * (v + v.T)
    return ClusteredCov(matrix=v, n_clusters=int(g),
                        dof_factor=float(factor), names=tuple(names))
