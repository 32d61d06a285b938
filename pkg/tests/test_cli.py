import csv
import json

import numpy as np
import pytest
from scipy.special import expit

from penfmr import cli
from penfmr.errors import DataError, NumericalError
from penfmr.io import load_dataset, load_sam_dataset, read_csv_table
from penfmr.model import ResponseFamily


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


@pytest.fixture
def fmr_csv(tmp_path):
    rng = np.random.default_rng(0)
    n = 120
    X = rng.standard_normal((n, 3))
    beta = np.array([[1.5, -1.5, 0.0], [-1.5, 0.0, 1.5]])
    labels = rng.choice(2, size=n)
    eta = np.array([0.5, -0.5])[labels] + np.einsum("ij,ij->i", X, beta[labels])
    y = rng.binomial(10, expit(eta))
    path = tmp_path / "data.csv"
    write_csv(path, ["x1", "x2", "x3", "counts"],
              [list(np.round(X[i], 6)) + [int(y[i])] for i in range(n)])
    return path


@pytest.fixture
def sam_csvs(tmp_path):
    rng = np.random.default_rng(1)
    n, s, p = 80, 12, 3
    X = rng.standard_normal((n, p))
    b0 = rng.normal(-0.2, 0.5, size=s)
    beta = np.array([[1.2, -1.2, 0.0], [-1.2, 1.2, 0.0]])
    z = rng.choice(2, size=s)
    Y = rng.binomial(1, expit(X @ beta[z].T + b0[None, :]))
    # keep every species mixed so no degeneracy warnings fire
    Y[0, :] = 1
    Y[1, :] = 0
    pa = tmp_path / "pa.csv"
    cov = tmp_path / "cov.csv"
    ids = [f"site{i:03d}" for i in range(n)]
    write_csv(pa, ["site_id"] + [f"sp{j}" for j in range(s)],
              [[ids[i]] + list(Y[i]) for i in range(n)])
    write_csv(cov, ["site_id", "env1", "env2", "env3"],
              [[ids[i]] + list(np.round(X[i], 6)) for i in range(n)])
    return pa, cov


def write_config(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh)
    return path


class TestIngestion:
    def test_load_dataset_roundtrip(self, fmr_csv):
        data = load_dataset(fmr_csv, "counts",
                            ResponseFamily("binomial", 10))
        assert data.n == 120 and data.p == 3
        assert data.column_names == ("x1", "x2", "x3")
        np.testing.assert_allclose(data.X.mean(axis=0), 0, atol=1e-10)

    def test_missing_response_column(self, fmr_csv):
        with pytest.raises(DataError, match="nope"):
            load_dataset(fmr_csv, "nope", ResponseFamily("bernoulli"))

    def test_missing_values_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        write_csv(path, ["x1", "y"], [[1.0, 2.0], ["", 3.0], [2.0, 1.0]])
        with pytest.raises(DataError, match="missing value"):
            load_dataset(path, "y", ResponseFamily("gaussian"))

    def test_non_numeric_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        write_csv(path, ["x1", "y"], [[1.0, 2.0], ["abc", 3.0]])
        with pytest.raises(DataError, match="non-numeric"):
            load_dataset(path, "y", ResponseFamily("gaussian"))

    def test_sam_alignment(self, sam_csvs, tmp_path):
        pa, cov = sam_csvs
        data = load_sam_dataset(pa, cov)
        assert data.n == 80 and data.s == 12 and data.p == 3
        shuffled = tmp_path / "cov2.csv"
        names, rows = read_csv_table(cov)
        rows = rows[1:] + rows[:1]
        write_csv(shuffled, names, [[r[c] for c in names] for r in rows])
        with pytest.raises(DataError, match="site ids"):
            load_sam_dataset(pa, shuffled)

    def test_sam_quadratic_terms(self, sam_csvs):
        pa, cov = sam_csvs
        data = load_sam_dataset(pa, cov, quadratic=True)
        assert data.p == 6
        assert data.column_names[3:] == ("env1^2", "env2^2", "env3^2")


class TestCmdFit:
    def run_fit(self, tmp_path, fmr_csv, outname, extra=None, argv_extra=()):
        payload = {
            "data_csv": str(fmr_csv), "response_column": "counts",
            "family": "binomial", "trial_size": 10, "n_components": 2,
            "penalty_family": "NONE", "n_starts": 3, "max_em_iter": 300,
        }
        if extra:
            payload.update(extra)
        cfg = write_config(tmp_path / f"{outname}.json", payload)
        out = tmp_path / outname
        rc = cli.main(["fit", "--config", str(cfg), "--out", str(out),
                       *argv_extra])
        return rc, out

    def test_coefficient_row_count(self, tmp_path, fmr_csv):
        rc, out = self.run_fit(tmp_path, fmr_csv, "run1")
        assert rc == 0
        names, rows = read_csv_table(out / "coefficients.csv")
        assert len(rows) == 2 * (3 + 1)
        assert (out / "manifest.json").exists()
        assert (out / "fit.json").exists()

    def test_rerun_is_byte_identical(self, tmp_path, fmr_csv):
        rc1, out1 = self.run_fit(tmp_path, fmr_csv, "runA")
        rc2, out2 = self.run_fit(tmp_path, fmr_csv, "runB")
        assert rc1 == rc2 == 0
        for name in ("coefficients.csv", "fit.json", "bic_table.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_rerun_from_manifest(self, tmp_path, fmr_csv):
        rc1, out1 = self.run_fit(tmp_path, fmr_csv, "runM")
        out2 = tmp_path / "runM2"
        rc2 = cli.main(["fit", "--config", str(out1 / "manifest.json"),
                        "--out", str(out2)])
        assert rc1 == rc2 == 0
        assert (out1 / "coefficients.csv").read_bytes() == \
            (out2 / "coefficients.csv").read_bytes()

    def test_fixed_lambda_path(self, tmp_path, fmr_csv):
        rc, out = self.run_fit(
            tmp_path, fmr_csv, "fixedlam",
            extra={"penalty_family": "MIXGL1", "lambda": 0.05, "gamma": 1.0})
        assert rc == 0
        names, rows = read_csv_table(out / "bic_table.csv")
        assert len(rows) == 1
        assert float(rows[0]["lambda"]) == 0.05

    def test_missing_response_column_exit_2(self, tmp_path, fmr_csv, capsys):
        rc, _ = self.run_fit(tmp_path, fmr_csv, "bad",
                             extra={"response_column": "missing_col"})
        assert rc == 2
        assert "missing_col" in capsys.readouterr().err

    def test_unknown_config_key_exit_2(self, tmp_path, fmr_csv):
        rc, _ = self.run_fit(tmp_path, fmr_csv, "bad2",
                             extra={"no_such_key": 1})
        assert rc == 2

    def test_numerical_failure_exit_3(self, tmp_path, fmr_csv, monkeypatch):
        def boom(config, outdir):
            raise NumericalError("forced")
        monkeypatch.setitem(cli._COMMANDS, "fit", boom)
        payload = {"data_csv": str(fmr_csv), "response_column": "counts",
                   "n_components": 2}
        cfg = write_config(tmp_path / "c3.json", payload)
        rc = cli.main(["fit", "--config", str(cfg),
                       "--out", str(tmp_path / "o3")])
        assert rc == 3

    def test_outputs_parse_back(self, tmp_path, fmr_csv):
        rc, out = self.run_fit(tmp_path, fmr_csv, "parse")
        for name in ("coefficients.csv", "bic_table.csv"):
            names, rows = read_csv_table(out / name)
            assert rows
            for row in rows:
                float(row.get("estimate", row.get("bic")))


class TestCmdSam:
    def run_sam(self, tmp_path, sam_csvs, outname, extra=None):
        pa, cov = sam_csvs
        payload = {
            "pa_csv": str(pa), "covariates_csv": str(cov),
            "penalty_family": "NONE", "k_min": 1, "k_max": 1,
            "n_starts": 2, "max_em_iter": 200,
        }
        if extra:
            payload.update(extra)
        cfg = write_config(tmp_path / f"{outname}.json", payload)
        out = tmp_path / outname
        rc = cli.main(["sam", "--config", str(cfg), "--out", str(out)])
        return rc, out

    def test_degenerate_k_range(self, tmp_path, sam_csvs):
        rc, out = self.run_sam(tmp_path, sam_csvs, "sam1")
        assert rc == 0
        names, rows = read_csv_table(out / "eta.csv")
        assert len(rows) == 80
        assert names == ["site_id", "archetype_1"]
        names, rows = read_csv_table(out / "archetype_coefficients.csv")
        assert len(rows) == 1 * 3
        names, rows = read_csv_table(out / "bic_k.csv")
        assert len(rows) == 1

    def test_misaligned_sites_exit_2(self, tmp_path, sam_csvs):
        pa, cov = sam_csvs
        names, rows = read_csv_table(cov)
        rows = rows[::-1]
        bad = tmp_path / "cov_bad.csv"
        write_csv(bad, names, [[r[c] for c in names] for r in rows])
        rc, _ = self.run_sam(tmp_path, (pa, bad), "sam2")
        assert rc == 2

    def test_eta_has_k_columns(self, tmp_path, sam_csvs):
        rc, out = self.run_sam(tmp_path, sam_csvs, "sam3",
                               extra={"k_min": 2, "k_max": 2})
        assert rc == 0
        names, rows = read_csv_table(out / "eta.csv")
        assert names == ["site_id", "archetype_1", "archetype_2"]


class TestCmdSimulate:
    def test_small_campaign(self, tmp_path):
        payload = {
            "models": ["IV"], "ns": [100], "pi1s": [0.5],
            "methods": ["MIXGL1"], "replicates": 2, "n_test": 300,
            "n_lambdas": 3, "gammas": [1.0], "n_starts": 2,
            "max_em_iter": 150,
        }
        cfg = write_config(tmp_path / "sim.json", payload)
        out = tmp_path / "sim"
        rc = cli.main(["simulate", "--config", str(cfg), "--out", str(out)])
        assert rc == 0
        names, rows = read_csv_table(out / "replicates.csv")
        assert len(rows) == 2
        names, rows = read_csv_table(out / "summary.csv")
        assert len(rows) == 1
        assert "/" in rows[0]["MIXGL1"]
        sens = float(rows[0]["MIXGL1"].split("/")[0])
        assert 0.0 <= sens <= 1.0

    def test_paper_scale_flag_sets_500(self, tmp_path, monkeypatch):
        captured = {}

        def fake_campaign(*args, **kwargs):
            captured.update(kwargs)
            return []

        monkeypatch.setattr(cli, "run_campaign", fake_campaign)
        payload = {"models": ["I"], "ns": [100], "methods": ["MIXGL1"],
                   "replicates": 2, "n_test": 100}
        cfg = write_config(tmp_path / "ps.json", payload)
        rc = cli.main(["simulate", "--config", str(cfg),
                       "--out", str(tmp_path / "ps"), "--paper-scale"])
        assert rc == 0
        assert captured["n_replicates"] == 500


class TestCmdStability:
    def test_single_restart_exit_2(self, tmp_path):
        payload = {"synthetic": {"n": 50, "s": 10, "K": 2, "p": 4},
                   "n_components": 2, "penalty_family": "NONE",
                   "lambda": 0.0, "n_restarts": 1}
        cfg = write_config(tmp_path / "st1.json", payload)
        rc = cli.main(["stability", "--config", str(cfg),
                       "--out", str(tmp_path / "st1")])
        assert rc == 2

    def test_identical_specs_ratio_one(self, tmp_path):
        payload = {"synthetic": {"n": 60, "s": 10, "K": 2, "p": 4, "seed": 3},
                   "n_components": 2, "penalty_family": "NONE",
                   "lambda": 0.0, "n_restarts": 2, "max_em_iter": 100}
        cfg = write_config(tmp_path / "st2.json", payload)
        out = tmp_path / "st2"
        rc = cli.main(["stability", "--config", str(cfg), "--out", str(out)])
        assert rc == 0
        report = json.loads((out / "stability.json").read_text())
        assert report["variance_ratio"] == pytest.approx(1.0, abs=1e-12)
        names, rows = read_csv_table(out / "restarts.csv")
        assert len(rows) == 4  # 2 restarts x 2 arms


class TestConfigHandling:
    def test_nonexistent_config(self, tmp_path):
        rc = cli.main(["fit", "--config", str(tmp_path / "nope.json"),
                       "--out", str(tmp_path / "o")])
        assert rc == 2

    def test_seed_flag_overrides_config(self, tmp_path, fmr_csv):
        payload = {"data_csv": str(fmr_csv), "response_column": "counts",
                   "family": "binomial", "trial_size": 10,
                   "n_components": 1, "penalty_family": "NONE", "seed": 1,
                   "n_starts": 2}
        cfg = write_config(tmp_path / "seed.json", payload)
        out = tmp_path / "seedout"
        rc = cli.main(["fit", "--config", str(cfg), "--out", str(out),
                       "--seed", "42"])
        assert rc == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 42
        assert manifest["version"]
