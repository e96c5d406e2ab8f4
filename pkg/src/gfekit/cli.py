"""Command-line entry point for reproducible estimation runs.

Three subcommands cover the workflow: `estimate` ingests a panel file
and runs the pooled, within, and grouped estimators; `simulate` runs
the Monte Carlo study; `fit-model` estimates the behavioural model by
simulated method of moments. Every run is driven by a JSON config file
whose scalar fields can be overridden on the command line with
--key.path=value flags. Outputs embed a hash of the resolved config and
the seed, never a timestamp, so repeated runs are byte-identical.

Exit codes: 0 success, 1 runtime or estimation error (a machine
readable error.json lands in the output directory), 2 configuration
error.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from dataclasses import replace

from .behavioral import BehavioralParams, Grid, group_moment_series
from .errors import ConfigError, GfekitError, SpecError
from .estimators import DesignSpec, fe_fit, gfe_fit, group_flow, ols_fit, \
    select_groups
from .panel import balance_panel, build_design, load_panel
from .reports import svg_line_chart, write_csv, write_report
from .simulation import DgpSpec, run_monte_carlo
from .smm import DEFAULT_BOUNDS, PARAM_NAMES, SmmConfig, bundled_target_path, \
    fit_smm, load_moment_target
from .util import jsonable

OVERRIDE_RE = re.compile(r"^--([A-Za-z0-9_][A-Za-z0-9_.]*)=(.*)$", re.S)

DEFAULT_SCHEMA = {"unit": "unit", "period": "period",
                  "outcome": "outcome", "treatment": "treatment"}


def _load_config(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file '{path}' does not exist")
    try:
        with open(path, encoding="utf-8") as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"could not parse config '{path}': {exc}")
    if not isinstance(config, dict):
        raise ConfigError("config root must be an object")
    return config


def _apply_overrides(config, tokens):
    """Fold --key.path=value flags into the config dict."""
    for token in tokens:
        m = OVERRIDE_RE.match(token)
        if not m:
            raise ConfigError(f"unrecognised argument '{token}' "
                              "(expected --key.path=value)")
        path, raw = m.group(1), m.group(2)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        keys = path.split(".")
        for key in keys[:-1]:
            nxt = node.get(key)
            if not isinstance(nxt, dict):
                nxt = {}
                node[key] = nxt
            node = nxt
        node[keys[-1]] = value
    return config


def _require(config, key, kind=None):
    if key not in config or config[key] is None:
        raise ConfigError(f"config key '{key}' is required")
    value = config[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(f"config key '{key}' has the wrong type")
    return value


def _prepare_out_dir(config):
    out_dir = _require(config, "output_dir", str)
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def _require_seed(config):
    seed = _require(config, "seed")
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("config key 'seed' must be an integer")
    return seed


def _write_error(out_dir, exc):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("column", "columns", "line"):
        value = getattr(exc, attr, None)
        if value:
            payload[attr] = jsonable(value)
    try:
        with open(os.path.join(out_dir, "error.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError:
        pass


def _fit_payload(fit):
    out = {
        "coefficients": dict(zip(fit.names, (float(c) for c in
                                             fit.coefficients))),
        "objective": float(fit.objective),
    }
    if fit.cov is not None:
        out["standard_errors"] = dict(zip(fit.cov.names,
                                          (float(s) for s in fit.cov.se())))
        out["n_clusters"] = fit.cov.n_clusters
    if fit.treatment_ix is not None:
        out["treatment_effect"] = fit.xi_hat
        out["treatment_se"] = fit.xi_se
    return out


def _gfe_payload(fit):
    out = _fit_payload(fit)
    out.update({
        "G": fit.G,
        "labels": fit.labels.tolist(),
        "units": fit.units.tolist(),
        "profiles": fit.profiles.tolist(),
        "profiles_presentation": fit.profiles_presentation.tolist(),
        "demeaned": fit.demeaned,
        "converged": fit.converged,
        "n_restarts": len(fit.restart_objectives),
        "best_objective": float(min(fit.restart_objectives)),
        "worst_objective": float(max(fit.restart_objectives)),
    })
    return out


def _write_profiles(out_dir, fit, stem="profiles"):
    t = fit.profiles.shape[1]
    header = ["period"] + [f"group{g}" for g in range(1, fit.G + 1)]
    rows = [[p + 1] + [float(v) for v in fit.profiles_presentation[:, p]]
            for p in range(t)]
    write_csv(os.path.join(out_dir, f"{stem}.csv"), header, rows)
    periods = list(range(1, t + 1))
    series = {f"group {g + 1}": (periods,
                                 fit.profiles_presentation[g].tolist())
              for g in range(fit.G)}
    svg_line_chart(os.path.join(out_dir, f"{stem}.svg"), series,
                   title="Recovered group profiles", x_label="period",
                   y_label="profile value")


# ---------------------------------------------------------------------------
# estimate


def _prepare_estimate(config):
    out_dir = _prepare_out_dir(config)
    seed = _require_seed(config)
    input_path = _require(config, "input", str)
    if not os.path.exists(input_path):
        raise ConfigError(f"input panel '{input_path}' does not exist")

    schema = dict(DEFAULT_SCHEMA)
    schema.update(config.get("schema", {}))

    design_cfg = dict(config.get("design", {}))
    regressors = tuple(design_cfg.pop("regressors", ("treatment",)))
    base_design = DesignSpec(regressors=regressors, **design_cfg)
    if base_design.period_effects:
        raise ConfigError("do not set design.period_effects; the within "
                          "estimator adds period dummies itself")

    estimators = tuple(config.get("estimators", ("ols", "fe", "gfe")))
    for name in estimators:
        if name not in ("ols", "fe", "gfe"):
            raise ConfigError(f"unknown estimator '{name}'")
    g_single = config.get("G")
    g_range = config.get("G_range")
    if "gfe" in estimators and g_single is None and g_range is None:
        raise ConfigError("gfe estimation needs 'G' or 'G_range'")

    return {
        "config": config,
        "out_dir": out_dir,
        "seed": seed,
        "input": input_path,
        "schema": schema,
        "balance": bool(config.get("balance", True)),
        "design": base_design,
        "estimators": estimators,
        "G": g_single,
        "G_range": tuple(g_range) if g_range else None,
        "G_max": int(config.get("G_max", max(g_range) if g_range else 10)),
        "restarts": config.get("restarts"),
        "demean": bool(config.get("demean", False)),
    }


def cmd_estimate(prep):
    config, out_dir, seed = prep["config"], prep["out_dir"], prep["seed"]
    panel = load_panel(prep["input"], prep["schema"])
    if prep["balance"]:
        panel = balance_panel(panel)
    base = prep["design"]

    if "ols" in prep["estimators"]:
        regs = base.regressors if "const" in base.regressors else \
            ("const",) + base.regressors
        fit = ols_fit(build_design(panel, replace(base, regressors=regs)))
        payload = _fit_payload(fit)
        payload["estimator"] = "ols"
        write_report(os.path.join(out_dir, "report_ols.json"), payload,
                     config=config, seed=seed)

    if "fe" in prep["estimators"]:
        fit = fe_fit(panel, replace(base, period_effects=True))
        payload = _fit_payload(fit)
        payload["estimator"] = "fe"
        write_report(os.path.join(out_dir, "report_fe.json"), payload,
                     config=config, seed=seed)

    if "gfe" in prep["estimators"]:
        if prep["G_range"]:
            scan = select_groups(panel, base, prep["G_range"],
                                 G_max=prep["G_max"],
                                 restarts=prep["restarts"],
                                 demean=prep["demean"], seed=seed)
            for fit in scan.fits:
                payload = _gfe_payload(fit)
                payload["estimator"] = "gfe"
                write_report(
                    os.path.join(out_dir, f"report_gfe_G{fit.G}.json"),
                    payload, config=config, seed=seed)
            write_report(os.path.join(out_dir, "scan.json"), {
                "g_values": scan.g_values,
                "objectives": scan.objectives,
                "penalties_standard": scan.penalties_standard,
                "penalties_steep": scan.penalties_steep,
                "criteria_standard": scan.criteria_standard,
                "criteria_steep": scan.criteria_steep,
                "sigma2_hat": scan.sigma2_hat,
                "g_max": scan.g_max,
                "selected_standard": scan.selected_standard,
                "selected_steep": scan.selected_steep,
            }, config=config, seed=seed)
            chosen = scan.fits[scan.g_values.index(scan.selected_steep)]
            _write_profiles(out_dir, chosen)
            if len(scan.fits) >= 2:
                rows = []
                for (ga, gb), table in group_flow(scan.fits):
                    for i in range(ga):
                        for j in range(gb):
                            rows.append([ga, gb, i + 1, j + 1,
                                         int(table[i, j])])
                write_csv(os.path.join(out_dir, "group_flow.csv"),
                          ["from_G", "to_G", "from_group", "to_group",
                           "count"], rows)
        else:
            fit = gfe_fit(panel, base, int(prep["G"]),
                          restarts=prep["restarts"],
                          demean=prep["demean"], seed=seed)
            payload = _gfe_payload(fit)
            payload["estimator"] = "gfe"
            write_report(os.path.join(out_dir, f"report_gfe_G{fit.G}.json"),
                         payload, config=config, seed=seed)
            _write_profiles(out_dir, fit)
    return 0


# ---------------------------------------------------------------------------
# simulate


def _prepare_simulate(config):
    out_dir = _prepare_out_dir(config)
    seed = _require_seed(config)
    replications = _require(config, "replications", int)
    if replications < 1:
        raise ConfigError("replications must be >= 1")

    dgp_cfg = dict(_require(config, "dgp", dict))
    for key in ("shares", "treat_probs", "lag_coefs"):
        if key in dgp_cfg:
            dgp_cfg[key] = tuple(dgp_cfg[key])
    dgp_cfg.setdefault("seed", seed)
    unknown = set(dgp_cfg) - set(DgpSpec.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown dgp fields: {sorted(unknown)}")
    try:
        spec = DgpSpec(**dgp_cfg)
        spec.validate()
    except (SpecError, TypeError) as exc:
        raise ConfigError(f"bad dgp configuration: {exc}")

    g_range = tuple(config.get("G_range", (2, 3, 4, 5)))
    return {
        "config": config,
        "out_dir": out_dir,
        "seed": seed,
        "spec": spec,
        "replications": replications,
        "estimators": tuple(config.get("estimators", ("ols", "fe", "gfe"))),
        "g_range": g_range,
        "gfe_restarts": int(config.get("gfe_restarts", 15)),
        "bic_scan": bool(config.get("bic_scan", False)),
        "bic_g_range": tuple(config.get("bic_G_range", range(1, 11))),
        "bic_g_max": int(config.get("bic_G_max", 10)),
        "workers": config.get("workers"),
    }


def cmd_simulate(prep):
    config, out_dir, seed = prep["config"], prep["out_dir"], prep["seed"]
    result = run_monte_carlo(
        prep["spec"], prep["replications"], estimators=prep["estimators"],
        G_range=prep["g_range"], gfe_restarts=prep["gfe_restarts"],
        bic_scan=prep["bic_scan"], bic_G_range=prep["bic_g_range"],
        bic_G_max=prep["bic_g_max"], workers=prep["workers"],
    )
    aggregates = result.aggregates()
    study = {
        "dgp": {f: getattr(result.spec, f)
                for f in result.spec.__dataclass_fields__},
        "replications_requested": prep["replications"],
        "replications_completed": result.n_completed,
        "estimators": result.estimator_names,
        "aggregates": aggregates,
        "failures": list(result.failures),
        "options": result.options,
    }
    if prep["bic_scan"]:
        study["modal_selection"] = {
            "standard": result.modal_selection("standard"),
            "steep": result.modal_selection("steep"),
        }
    write_report(os.path.join(out_dir, "study.json"), study,
                 config=config, seed=seed)

    true_g = result.spec.n_groups
    rows = []
    for record in result.records:
        for name in result.estimator_names:
            rmse = record.profile_rmse if name == f"gfe{true_g}" else ""
            rows.append([
                record.rep, name,
                float(record.xi_hat[name]), float(record.xi_se[name]),
                rmse if rmse != "" else "",
                record.bic_standard if record.bic_standard is not None
                else "",
                record.bic_steep if record.bic_steep is not None else "",
            ])
    write_csv(os.path.join(out_dir, "replications.csv"),
              ["rep", "estimator", "xi_hat", "xi_se", "profile_rmse",
               "bic_standard", "bic_steep"], rows)

    fig_rows = [[name, agg["mean"], agg["bias"], agg["sd"], agg["mc_se"],
                 agg["coverage"]] for name, agg in aggregates.items()]
    write_csv(os.path.join(out_dir, "fig_coef.csv"),
              ["estimator", "mean", "bias", "sd", "mc_se", "coverage"],
              fig_rows)
    positions = list(range(len(aggregates)))
    biases = [aggregates[n]["bias"] for n in result.estimator_names]
    bands_hi = [aggregates[n]["bias"] + 2 * aggregates[n]["mc_se"]
                for n in result.estimator_names]
    bands_lo = [aggregates[n]["bias"] - 2 * aggregates[n]["mc_se"]
                for n in result.estimator_names]
    svg_line_chart(os.path.join(out_dir, "fig_coef.svg"),
                   {"bias": (positions, biases),
                    "+2 mc-se": (positions, bands_hi),
                    "-2 mc-se": (positions, bands_lo)},
                   title="Estimator bias", x_label="estimator index",
                   y_label="bias")

    if prep["bic_scan"]:
        std, steep = result.bic_selections()
        gs = sorted(set(prep["bic_g_range"]))
        count_std = {g: 0 for g in gs}
        count_steep = {g: 0 for g in gs}
        for v in std:
            count_std[v] = count_std.get(v, 0) + 1
        for v in steep:
            count_steep[v] = count_steep.get(v, 0) + 1
        gs = sorted(set(count_std) | set(count_steep))
        write_csv(os.path.join(out_dir, "fig_bic.csv"),
                  ["G", "count_standard", "count_steep"],
                  [[g, count_std.get(g, 0), count_steep.get(g, 0)]
                   for g in gs])
        svg_line_chart(os.path.join(out_dir, "fig_bic.svg"),
                       {"standard": (gs, [count_std.get(g, 0) for g in gs]),
                        "steep": (gs, [count_steep.get(g, 0) for g in gs])},
                       title="Selected group counts", x_label="G",
                       y_label="count")
    return 0


# ---------------------------------------------------------------------------
# fit-model


def _prepare_fit_model(config):
    out_dir = _prepare_out_dir(config)
    seed = _require_seed(config)

    target_path = config.get("target", "bundled")
    if target_path in (None, "bundled"):
        target_path = bundled_target_path()
    if not os.path.exists(target_path):
        raise ConfigError(f"target file '{target_path}' does not exist")

    params_cfg = dict(config.get("params", {}))
    unknown = set(params_cfg) - set(BehavioralParams.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown params fields: {sorted(unknown)}")
    try:
        base = replace(BehavioralParams(), **params_cfg)
    except GfekitError as exc:
        raise ConfigError(f"bad base parameters: {exc}")

    grid_cfg = dict(config.get("grid", {}))
    grid_cfg.setdefault("seed", seed)
    unknown = set(grid_cfg) - set(Grid.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown grid fields: {sorted(unknown)}")
    grid = Grid(**grid_cfg)

    smm_cfg = dict(config.get("smm", {}))
    bounds = dict(DEFAULT_BOUNDS)
    for name, pair in dict(smm_cfg.pop("bounds", {})).items():
        bounds[name] = (float(pair[0]), float(pair[1]))
    free = tuple(smm_cfg.pop("free", PARAM_NAMES))
    for name in free:
        if name not in BehavioralParams.__dataclass_fields__:
            raise ConfigError(f"unknown free parameter '{name}'")
    smm_cfg.setdefault("sim_seed", seed)
    unknown = set(smm_cfg) - set(SmmConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown smm fields: {sorted(unknown)}")
    try:
        smm = SmmConfig(free=free, bounds=bounds, **smm_cfg)
    except GfekitError as exc:
        raise ConfigError(f"bad smm configuration: {exc}")

    start = config.get("start")
    if start is not None:
        start = [float(v) for v in start]
        if len(start) != len(free):
            raise ConfigError("start must have one value per free param")

    return {
        "config": config,
        "out_dir": out_dir,
        "seed": seed,
        "target_path": target_path,
        "base": base,
        "grid": grid,
        "smm": smm,
        "start": start,
        "counterfactual": bool(config.get("counterfactual", True)),
    }


def cmd_fit_model(prep):
    config, out_dir, seed = prep["config"], prep["out_dir"], prep["seed"]
    target = load_moment_target(prep["target_path"])
    fit = fit_smm(target, prep["smm"], prep["grid"], seed=seed,
                  base=prep["base"], start=prep["start"])

    params_dict = {f: getattr(fit.params, f)
                   for f in BehavioralParams.__dataclass_fields__}
    write_report(os.path.join(out_dir, "fit.json"), {
        "params": params_dict,
        "objective": fit.objective,
        "free": list(fit.config.free),
        "start": fit.start.tolist(),
        "annealing": {"objective": fit.sa.fun, "n_evals": fit.sa.n_evals,
                      "n_temperatures": fit.sa.n_temperatures,
                      "stopped": fit.sa.stopped},
        "simplex": {"objective": fit.nm.fun, "n_evals": fit.nm.n_evals,
                    "diameter": fit.nm.diameter,
                    "converged": fit.nm.converged},
        "metadata": fit.metadata,
    }, config=config, seed=seed)

    horizon = target.values.shape[1]
    ages = [15 + t for t in range(1, horizon + 1)]
    group_names = ("low", "high")
    rows = []
    for gi, gname in enumerate(group_names):
        for t in range(horizon):
            rows.append([gname, ages[t], float(target.values[gi, t]),
                         float(fit.moments[gi, t]),
                         float(target.weights[gi, t])])
    write_csv(os.path.join(out_dir, "moments.csv"),
              ["group", "age", "target", "fitted", "weight"], rows)
    svg_line_chart(os.path.join(out_dir, "moments.svg"), {
        "target low": (ages, target.values[0].tolist()),
        "target high": (ages, target.values[1].tolist()),
        "fitted low": (ages, fit.moments[0].tolist()),
        "fitted high": (ages, fit.moments[1].tolist()),
    }, title="Diagnosis rates: target vs fitted", x_label="age",
        y_label="rate")

    if prep["counterfactual"]:
        series = group_moment_series(
            fit.params, prep["grid"], n_paths=fit.config.n_paths,
            seed=fit.config.sim_seed, moment_mode=fit.config.moment_mode,
            include_counterfactual=True, horizon=horizon)
        rows = [[ages[t], float(series["low"][t]), float(series["high"][t]),
                 float(series["high_nobias"][t])] for t in range(horizon)]
        write_csv(os.path.join(out_dir, "counterfactual.csv"),
                  ["age", "low", "high", "high_nobias"], rows)
        svg_line_chart(os.path.join(out_dir, "counterfactual.svg"), {
            "low": (ages, series["low"].tolist()),
            "high": (ages, series["high"].tolist()),
            "high no-bias": (ages, series["high_nobias"].tolist()),
        }, title="No-bias counterfactual", x_label="age", y_label="rate")
    return 0


# ---------------------------------------------------------------------------

COMMANDS = {
    "estimate": (_prepare_estimate, cmd_estimate),
    "simulate": (_prepare_simulate, cmd_simulate),
    "fit-model": (_prepare_fit_model, cmd_fit_model),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gfekit",
        description="Grouped fixed-effects estimation, Monte Carlo "
                    "studies, and structural model fitting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="JSON config file; --key.path=value overrides "
                            "any field")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)

    try:
        config = _load_config(args.config)
        _apply_overrides(config, extras)
        prepare, run = COMMANDS[args.command]
        prep = prepare(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        code = run(prep)
    except GfekitError as exc:
        _write_error(prep["out_dir"], exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote results to {prep['out_dir']}")
    return code


if __name__ == "__main__":
    sys.exit(main())
