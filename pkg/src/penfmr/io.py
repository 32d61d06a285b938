"""CSV/JSON ingestion and emission.

All floats are written with ``repr`` (shortest round-trip form) so a rerun
from the same manifest produces byte-identical files.
"""

import csv
import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import Dataset, ResponseFamily
from .sam import SamDataset

_INTERCEPT_LABEL = "(intercept)"


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def read_csv_table(path):
    """Generic CSV reader: header row plus list-of-dict string rows."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        rows = list(reader)
    return reader.fieldnames, rows


def write_csv_table(path, fieldnames, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([_fmt(row[name]) for name in fieldnames])


def _parse_float(text, path, column, line):
    text = text.strip() if text is not None else ""
    if text == "" or text.lower() in ("na", "nan"):
        raise DataError(f"{path}: missing value in column {column!r} at row {line}")
    try:
        return float(text)
    except ValueError:
        raise DataError(
            f"{path}: non-numeric value {text!r} in column {column!r} at row {line}"
        ) from None


def load_dataset(path, response_column: str, family: ResponseFamily) -> Dataset:
    """Ingest a covariates-plus-response CSV and standardize the covariates."""
    names, rows = read_csv_table(path)
    if response_column not in names:
        raise DataError(f"{path}: response column {response_column!r} not found")
    if not rows:
        raise DataError(f"{path}: no data rows")
    covariates = [c for c in names if c != response_column]
    if not covariates:
        raise DataError(f"{path}: no covariate columns")
    y = np.array([
        _parse_float(r[response_column], path, response_column, i + 2)
        for i, r in enumerate(rows)
    ])
    X = np.array([
        [_parse_float(r[c], path, c, i + 2) for c in covariates]
        for i, r in enumerate(rows)
    ])
    return Dataset.from_raw(X, y, family, column_names=tuple(covariates))


def load_sam_dataset(pa_path, covariates_path, site_id_column: str = "site_id",
                     quadratic: bool = False) -> SamDataset:
    """Ingest aligned presence-absence and covariate CSVs keyed on site ids."""
    pa_names, pa_rows = read_csv_table(pa_path)
    cov_names, cov_rows = read_csv_table(covariates_path)
    for path, names in ((pa_path, pa_names), (covariates_path, cov_names)):
        if site_id_column not in names:
            raise DataError(f"{path}: site id column {site_id_column!r} not found")
    pa_ids = [r[site_id_column] for r in pa_rows]
    cov_ids = [r[site_id_column] for r in cov_rows]
    if pa_ids != cov_ids:
        raise DataError(
            f"site ids disagree between {pa_path} and {covariates_path}")
    species = [c for c in pa_names if c != site_id_column]
    covs = [c for c in cov_names if c != site_id_column]
    if not species or not covs:
        raise DataError("need at least one species and one covariate column")
    Y = np.array([
        [_parse_float(r[c], pa_path, c, i + 2) for c in species]
        for i, r in enumerate(pa_rows)
    ])
    if not np.all((Y == 0.0) | (Y == 1.0)):
        raise DataError(f"{pa_path}: presence-absence entries must be 0 or 1")
    X = np.array([
        [_parse_float(r[c], covariates_path, c, i + 2) for c in covs]
        for i, r in enumerate(cov_rows)
    ])
    return SamDataset.from_raw(
        X, Y, species_names=tuple(species), site_ids=tuple(pa_ids),
        column_names=tuple(covs), quadratic=quadratic)


# -- fit outputs ----------------------------------------------------------------


def fit_result_to_dict(fit_result, spec, extra=None) -> dict:
    doc = {
        "params": fit_result.params.to_dict(),
        "penalty": spec.to_dict(),
        "loglik": fit_result.loglik,
        "penalized_objective": fit_result.penalized_objective,
        "n_nonzero": fit_result.n_nonzero,
        "converged": bool(fit_result.converged),
        "start_index": fit_result.start_index,
        "n_failed_starts": fit_result.n_failed_starts,
        "objective_trace": [float(v) for v in fit_result.objective_trace],
    }
    if extra:
        doc.update(extra)
    return doc


def write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def write_coefficient_csv(path, params, column_names) -> None:
    """Flat per-coefficient table: component, covariate, estimate, is_zero."""
    rows = []
    for k in range(params.n_components):
        rows.append({
            "component": k + 1, "covariate": _INTERCEPT_LABEL,
            "estimate": float(params.intercepts[k])
            if params.intercepts.shape[0] == params.n_components
            else float("nan"),
            "is_zero": False,
        })
        for l, name in enumerate(column_names):
            est = float(params.beta[k, l])
            rows.append({"component": k + 1, "covariate": name,
                         "estimate": est, "is_zero": est == 0.0})
    write_csv_table(path, ["component", "covariate", "estimate", "is_zero"], rows)


def write_archetype_coefficient_csv(path, params, column_names) -> None:
    """Per-archetype slope map: archetype, term, estimate, is_zero."""
    rows = []
    for k in range(params.n_components):
        for l, name in enumerate(column_names):
            est = float(params.beta[k, l])
            rows.append({"archetype": k + 1, "term": name,
                         "estimate": est, "is_zero": est == 0.0})
    write_csv_table(path, ["archetype", "term", "estimate", "is_zero"], rows)


def write_bic_table_csv(path, table) -> None:
    fields = ["lambda", "gamma", "ridge_lambda", "K", "loglik", "n_nonzero",
              "bic", "converged", "failed"]
    write_csv_table(path, fields, table)


def write_bic_k_table_csv(path, rows) -> None:
    write_csv_table(path, ["K", "loglik", "dim", "bic_k", "failed"], rows)


def write_eta_csv(path, site_ids, eta) -> None:
    """Per-site archetype linear predictors, one column per archetype."""
    K = eta.shape[1]
    fields = ["site_id"] + [f"archetype_{k + 1}" for k in range(K)]
    rows = [
        dict({"site_id": sid},
             **{f"archetype_{k + 1}": float(eta[i, k]) for k in range(K)})
        for i, sid in enumerate(site_ids)
    ]
    write_csv_table(path, fields, rows)


def write_replicate_csv(path, rows) -> None:
    fields = ["replicate", "model", "n", "pi1", "method", "sensitivity",
              "specificity", "pred_loglik", "pred_loglik_centered",
              "n_nonzero", "converged", "failed"]
    write_csv_table(path, fields, rows)


def write_summary_csv(path, summary, methods) -> None:
    """Wide sensitivity/specificity layout: one row per (n, model)."""
    cells = {}
    for row in summary:
        cells[(row["n"], row["model"], row["pi1"], row["method"])] = row
    keys = sorted({(r["n"], r["model"], r["pi1"]) for r in summary},
                  key=lambda t: (t[0], t[1], t[2]))
    fields = ["n", "model", "pi1"] + list(methods)
    out = []
    for n, model, pi1 in keys:
        row = {"n": n, "model": model, "pi1": pi1}
        for m in methods:
            cell = cells.get((n, model, pi1, m))
            row[m] = ("" if cell is None else
                      f"{cell['sensitivity']:.3f}/{cell['specificity']:.3f}")
        out.append(row)
    write_csv_table(path, fields, out)


def write_stability_csv(path, result) -> None:
    rows = []
    for arm, values, conv in (
        ("penalized", result.loglik_penalized, result.converged_penalized),
        ("unpenalized", result.loglik_unpenalized, result.converged_unpenalized),
    ):
        for i, v in enumerate(values):
            rows.append({"restart": i + 1, "model": arm, "loglik": float(v),
                         "converged": bool(conv[i])})
    write_csv_table(path, ["restart", "model", "loglik", "converged"], rows)
