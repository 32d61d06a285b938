"""Command-line surface: fit, sam, simulate, stability.

Every run resolves its configuration (file plus flag overrides) into a
manifest written alongside the outputs; rerunning any command from its
manifest reproduces the outputs byte for byte. Exit codes: 0 success,
2 input/config error, 3 numerical failure.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, NumericalError
from .io import (
    fit_result_to_dict,
    load_dataset,
    load_sam_dataset,
    read_json,
    write_archetype_coefficient_csv,
    write_bic_k_table_csv,
    write_bic_table_csv,
    write_coefficient_csv,
    write_csv_table,
    write_eta_csv,
    write_json,
    write_replicate_csv,
    write_stability_csv,
    write_summary_csv,
)
from .model import ResponseFamily
from .penalties import PENALTY_FAMILIES, PenaltySpec, adaptive_weights
from .sam import archetype_linear_predictor
from .selection import (
    TuningGrid,
    bic_tuning,
    select_num_components,
    select_tuning,
)
from .simbench import (
    COMPARED_METHODS,
    SamScenario,
    SimScenario,
    generate_sam_dataset,
    run_campaign,
    stability_experiment,
    summarize_campaign,
)
from .solver import FitControl, fit

_CONTROL_KEYS = {
    "max_em_iter": 500,
    "em_tol": 1e-6,
    "max_irls_iter": 25,
    "irls_tol": 1e-8,
    "n_starts": 10,
    "seed": 0,
    "pi_floor": 1e-4,
}

_GRID_KEYS = {
    "n_lambdas": 50,
    "lambda_min_ratio": 1e-4,
    "gammas": [0.5, 1.0, 2.0],
    "ridge_lambdas": [0.001, 0.01, 0.1],
}

_DEFAULTS = {
    "fit": {
        "data_csv": None, "response_column": None, "family": "binomial",
        "trial_size": 1, "n_components": None, "penalty_family": "MIXGL1",
        "lambda": None, "gamma": 1.0, "ridge_lambda": 0.0, "jobs": 1,
        **_GRID_KEYS, **_CONTROL_KEYS,
    },
    "sam": {
        "pa_csv": None, "covariates_csv": None, "site_id_column": "site_id",
        "quadratic": False, "penalty_family": "MIXGL1", "k_min": 1,
        "k_max": 5, "jobs": 1, **_GRID_KEYS, **_CONTROL_KEYS,
    },
    "simulate": {
        "models": ["I", "II", "III", "IV"], "ns": [100, 200, 400],
        "pi1s": [0.5], "methods": list(COMPARED_METHODS), "replicates": 50,
        "n_test": 10000, "jobs": 1, **_GRID_KEYS, **_CONTROL_KEYS,
    },
    "stability": {
        "pa_csv": None, "covariates_csv": None, "site_id_column": "site_id",
        "quadratic": False, "synthetic": None, "n_components": None,
        "penalty_family": "MIXGL1", "lambda": None, "gamma": 1.0,
        "n_restarts": 50, "jobs": 1, **_GRID_KEYS, **_CONTROL_KEYS,
    },
}


def _resolve_config(command: str, args) -> dict:
    try:
        raw = read_json(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {args.config}: {exc}") from None
    if isinstance(raw, dict) and "config" in raw and "command" in raw:
        if raw["command"] != command:
            raise DataError(
                f"manifest is for command {raw['command']!r}, not {command!r}")
        raw = raw["config"]
    config = dict(_DEFAULTS[command])
    unknown = set(raw) - set(config)
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    config.update(raw)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.jobs is not None:
        config["jobs"] = args.jobs
    if command == "simulate" and args.paper_scale:
        config["replicates"] = 500
    return config


def _require(config, keys):
    missing = [k for k in keys if config.get(k) is None]
    if missing:
        raise DataError(f"missing required config keys: {missing}")


def _control_from(config) -> FitControl:
    return FitControl(
        max_em_iter=int(config["max_em_iter"]),
        em_tol=float(config["em_tol"]),
        max_irls_iter=int(config["max_irls_iter"]),
        irls_tol=float(config["irls_tol"]),
        n_starts=int(config["n_starts"]),
        seed=int(config["seed"]),
        pi_floor=float(config["pi_floor"]),
    )


def _grid_from(config, sample_size_for_bic="n") -> TuningGrid:
    return TuningGrid(
        n_lambdas=int(config["n_lambdas"]),
        lambda_min_ratio=float(config["lambda_min_ratio"]),
        gammas=tuple(float(g) for g in config["gammas"]),
        ridge_lambdas=tuple(float(r) for r in config["ridge_lambdas"]),
        sample_size_for_bic=sample_size_for_bic,
    )


def _family_from(config) -> ResponseFamily:
    kind = config["family"]
    if kind not in ("binomial", "bernoulli", "gaussian"):
        raise DataError(f"unknown response family {kind!r}")
    return ResponseFamily(kind, trial_size=int(config.get("trial_size", 1)))


def _check_penalty_family(name: str) -> str:
    if name not in PENALTY_FAMILIES:
        raise DataError(f"unknown penalty family {name!r}")
    return name


def _write_manifest(outdir: Path, command: str, config: dict) -> None:
    write_json(outdir / "manifest.json", {
        "command": command, "version": __version__, "config": config,
    })


def cmd_fit(config: dict, outdir: Path) -> int:
    _require(config, ["data_csv", "response_column", "n_components"])
    family = _family_from(config)
    data = load_dataset(config["data_csv"], config["response_column"], family)
    K = int(config["n_components"])
    control = _control_from(config)
    pen_family = _check_penalty_family(config["penalty_family"])
    if config["lambda"] is not None and pen_family != "NONE":
        base = fit(data, K, PenaltySpec("NONE"), control)
        weights = adaptive_weights(base.params.beta, pen_family,
                                   float(config["gamma"]))
        spec = PenaltySpec(
            pen_family, lam=float(config["lambda"]),
            gamma=float(config["gamma"]),
            ridge_lambda=float(config["ridge_lambda"]), weights=weights)
        result = fit(data, K, spec, control, init_params=base.params)
        table = [{
            "lambda": spec.lam, "gamma": spec.gamma,
            "ridge_lambda": spec.ridge_lambda, "K": K,
            "loglik": result.loglik, "n_nonzero": result.n_nonzero,
            "bic": bic_tuning(result, data, data.n),
            "converged": result.converged, "failed": False,
        }]
    else:
        spec, result, table = select_tuning(
            data, K, pen_family, _grid_from(config), control)
    write_json(outdir / "fit.json",
               fit_result_to_dict(result, spec,
                                  extra={"column_names": list(data.column_names)}))
    write_coefficient_csv(outdir / "coefficients.csv", result.params,
                          data.column_names)
    write_bic_table_csv(outdir / "bic_table.csv", table)
    return 0


def cmd_sam(config: dict, outdir: Path) -> int:
    _require(config, ["pa_csv", "covariates_csv"])
    data = load_sam_dataset(config["pa_csv"], config["covariates_csv"],
                            site_id_column=config["site_id_column"],
                            quadratic=bool(config["quadratic"]))
    control = _control_from(config)
    grid = _grid_from(config, sample_size_for_bic="s")
    pen_family = _check_penalty_family(config["penalty_family"])
    best_K, fits, rows = select_num_components(
        data, (int(config["k_min"]), int(config["k_max"])), pen_family,
        grid, control)
    spec, result, table = fits[best_K]
    write_bic_k_table_csv(outdir / "bic_k.csv", rows)
    write_bic_table_csv(outdir / "bic_table.csv", table)
    write_archetype_coefficient_csv(outdir / "archetype_coefficients.csv",
                                    result.params, data.column_names)
    eta = archetype_linear_predictor(result, data.X)
    write_eta_csv(outdir / "eta.csv", data.site_ids, eta)
    write_json(outdir / "best_fit.json", fit_result_to_dict(
        result, spec, extra={
            "best_K": best_K,
            "species_names": list(data.species_names),
            "column_names": list(data.column_names),
        }))
    return 0


def cmd_simulate(config: dict, outdir: Path) -> int:
    for model in config["models"]:
        if model not in ("I", "II", "III", "IV"):
            raise DataError(f"unknown simulation model {model!r}")
    for method in config["methods"]:
        _check_penalty_family(method)
    scenarios = [
        SimScenario(model_id=model, n=int(n), pi1=float(pi1))
        for model in config["models"]
        for n in config["ns"]
        for pi1 in config["pi1s"]
    ]
    rows = run_campaign(
        scenarios,
        methods=tuple(config["methods"]),
        n_replicates=int(config["replicates"]),
        grid=_grid_from(config),
        control=_control_from(config),
        n_test=int(config["n_test"]),
        base_seed=int(config["seed"]),
        n_jobs=int(config["jobs"]),
    )
    summary = summarize_campaign(rows)
    write_replicate_csv(outdir / "replicates.csv", rows)
    write_summary_csv(outdir / "summary.csv", summary,
                      methods=tuple(config["methods"]))
    fields = ["model", "n", "pi1", "method", "n_ok", "n_failed",
              "sensitivity", "specificity", "pred_loglik_centered"]
    write_csv_table(outdir / "summary_long.csv", fields, summary)
    return 0


def cmd_stability(config: dict, outdir: Path) -> int:
    if int(config["n_restarts"]) < 2:
        raise DataError("n_restarts must be at least 2 to estimate a variance")
    _require(config, ["n_components", "lambda"])
    if config.get("synthetic"):
        syn = dict(config["synthetic"])
        scenario = SamScenario(
            n=int(syn["n"]), s=int(syn["s"]), K=int(syn.get("K", 3)),
            p=int(syn.get("p", 8)), seed=int(syn.get("seed", 0)))
        data, _, _ = generate_sam_dataset(scenario)
    else:
        _require(config, ["pa_csv", "covariates_csv"])
        data = load_sam_dataset(config["pa_csv"], config["covariates_csv"],
                                site_id_column=config["site_id_column"],
                                quadratic=bool(config["quadratic"]))
    control = _control_from(config)
    K = int(config["n_components"])
    pen_family = _check_penalty_family(config["penalty_family"])
    if pen_family == "NONE":
        spec_pen = PenaltySpec("NONE")
    else:
        from .sam import sam_fit
        base = sam_fit(data, K, PenaltySpec("NONE"), control)
        weights = adaptive_weights(base.params.beta, pen_family,
                                   float(config["gamma"]))
        spec_pen = PenaltySpec(pen_family, lam=float(config["lambda"]),
                               gamma=float(config["gamma"]), weights=weights)
    result = stability_experiment(
        data, K, spec_pen, PenaltySpec("NONE"),
        n_restarts=int(config["n_restarts"]), seed=int(config["seed"]),
        control=control)
    write_stability_csv(outdir / "restarts.csv", result)
    write_json(outdir / "stability.json", {
        "variance_penalized": result.var_penalized,
        "variance_unpenalized": result.var_unpenalized,
        "variance_ratio": result.variance_ratio,
        "f_statistic": result.f_statistic,
        "p_value": result.p_value,
        "n_failed_penalized": result.n_failed_penalized,
        "n_failed_unpenalized": result.n_failed_unpenalized,
    })
    return 0


_COMMANDS = {
    "fit": cmd_fit,
    "sam": cmd_sam,
    "simulate": cmd_simulate,
    "stability": cmd_stability,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="penfmr",
        description="Penalized mixture-of-regressions fitting, tuning, "
                    "archetype modeling and simulation benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config or manifest")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--paper-scale", action="store_true",
                       help="run simulate at 500 replicates per cell")
    args = parser.parse_args(argv)
    try:
        config = _resolve_config(args.command, args)
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        _write_manifest(outdir, args.command, config)
        return _COMMANDS[args.command](config, outdir)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
