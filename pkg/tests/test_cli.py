"""Config parsing, the experiment pipeline, artifacts and CLI exit codes."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from scalegp import bench, cli
from scalegp.exceptions import ConfigError


def tiny_config(out, method="full", **overrides):
    cfg = bench.ExperimentConfig(method=method, generator="sinc", n_train=40,
                                 n_test=60, seed=0, m=6, M=4, b=10,
                                 max_iters=25, svgp_iters=60, plots=False,
                                 out=str(out))
    for key, val in overrides.items():
        setattr(cfg, key, val)
    return cfg.validate()


class TestConfigParsing:
    def test_roundtrip_with_comments(self):
        text = """
        # sinc toy
        method = vfe
        generator = sinc
        m = 15            # inducing size
        trainable_z = true
        test_fraction = 0.25
        """
        cfg = bench.parse_config_text(text)
        assert cfg.method == "vfe" and cfg.m == 15 and cfg.trainable_z

    def test_unknown_key_is_error(self):
        with pytest.raises(ConfigError, match="unknown key 'foo'"):
            bench.parse_config_text("method = full\ngenerator = sinc\nfoo = 1")

    def test_invalid_method_names_field(self):
        with pytest.raises(ConfigError, match="method"):
            bench.parse_config_text("method = kriging\ngenerator = sinc")

    def test_bad_int_value(self):
        with pytest.raises(ConfigError, match="bad value for 'm'"):
            bench.parse_config_text("method = vfe\ngenerator = sinc\nm = lots")

    def test_needs_exactly_one_source(self):
        with pytest.raises(ConfigError):
            bench.parse_config_text("method = full")
        with pytest.raises(ConfigError):
            bench.parse_config_text(
                "method = full\ngenerator = sinc\ndata = x.csv\ntarget = t")

    def test_missing_csv_file(self):
        with pytest.raises(ConfigError, match="file not found"):
            bench.parse_config_text("method = full\ndata = /nope.csv\ntarget = t")

    def test_bcm_requires_shared_mode(self):
        with pytest.raises(ConfigError, match="shared"):
            bench.parse_config_text(
                "method = rbcm\ngenerator = sinc\nmode = individual")


class TestRunExperiment:
    def test_full_gp_on_sinc(self, tmp_path):
        report = bench.run_experiment(tiny_config(tmp_path / "run", n_train=120,
                                                  n_test=300, max_iters=100))
        assert report.diagnostics["smse_latent_inrange"] < 0.05
        assert report.smse >= 0 and report.train_time_s >= 0
        assert (tmp_path / "run" / "report.json").is_file()
        assert (tmp_path / "run" / "predictions.csv").is_file()
        assert (tmp_path / "run" / "model.json").is_file()

    def test_vfe_bound_close_to_full_nlml(self, tmp_path):
        r_full = bench.run_experiment(tiny_config(tmp_path / "f", n_train=120,
                                                  n_test=50, max_iters=100))
        r_vfe = bench.run_experiment(tiny_config(tmp_path / "v", method="vfe",
                                                 n_train=120, n_test=50, m=15,
                                                 max_iters=100))
        assert abs(r_vfe.nlml_or_bound - r_full.nlml_or_bound) < 2.0

    def test_reports_deterministic_up_to_wall_times(self, tmp_path):
        r1 = bench.run_experiment(tiny_config(tmp_path / "a")).to_dict()
        r2 = bench.run_experiment(tiny_config(tmp_path / "b")).to_dict()
        for r in (r1, r2):
            r.pop("train_time_s")
            r.pop("predict_time_s")
            r.pop("artifacts")
        assert r1 == r2

    def test_figures_rendered_when_enabled(self, tmp_path):
        cfg = tiny_config(tmp_path / "run", method="vfe", plots=True)
        report = bench.run_experiment(cfg)
        assert Path(report.artifacts["prediction_figure"]).stat().st_size > 0
        assert Path(report.artifacts["trace_figure"]).stat().st_size > 0

    def test_predictions_csv_schema(self, tmp_path):
        report = bench.run_experiment(tiny_config(tmp_path / "run"))
        with open(report.artifacts["predictions"], newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["x1", "y", "y_latent", "mean_norm", "var_norm",
                           "mean", "var"]
        body = np.array(rows[1:], dtype=float)
        assert body.shape[0] == 60
        assert np.all(body[:, 4] > 0)  # observed variances positive

    def test_trace_csv_two_columns(self, tmp_path):
        report = bench.run_experiment(tiny_config(tmp_path / "run"))
        with open(report.artifacts["trace"], newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iteration", "objective"]
        vals = np.array([float(r[1]) for r in rows[1:]])
        assert np.all(np.diff(vals) <= 1e-12)  # deterministic fits are monotone

    def test_stage_name_in_failure_and_partial_outputs_removed(self, tmp_path, monkeypatch):
        from scalegp import plots

        def boom(*args, **kwargs):
            raise OSError("disk full")

        monkeypatch.setattr(plots, "prediction_figure", boom)
        cfg = tiny_config(tmp_path / "run", plots=True)
        with pytest.raises(OSError, match="stage 'write'"):
            bench.run_experiment(cfg)
        leftovers = list((tmp_path / "run").glob("*"))
        assert leftovers == []

    def test_seed_changes_split_and_report(self, tmp_path):
        r0 = bench.run_experiment(tiny_config(tmp_path / "s0", seed=0))
        r1 = bench.run_experiment(tiny_config(tmp_path / "s1", seed=1))
        assert r0.seeds == {"seed": 0} and r1.seeds == {"seed": 1}
        assert r0.smse != r1.smse

    def test_csv_source_pipeline(self, tmp_path):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(80, 2))
        y = np.sin(X[:, 0]) + 0.1 * rng.normal(size=80)
        path = tmp_path / "d.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["a", "b", "t"])
            for i in range(80):
                w.writerow([X[i, 0], X[i, 1], y[i]])
        cfg = bench.ExperimentConfig(method="full", data=str(path), target="t",
                                     test_fraction=0.25, max_iters=30,
                                     plots=False, out=str(tmp_path / "run")).validate()
        report = bench.run_experiment(cfg)
        assert report.data_info["n_train"] == 60
        assert report.data_info["n_test"] == 20
        assert report.smse < 1.0


class TestSnapshotReload:
    def test_sparse_snapshot_reproduces_predictions(self, tmp_path):
        cfg = tiny_config(tmp_path / "run", method="vfe")
        report = bench.run_experiment(cfg)
        snapshot = json.loads(Path(report.artifacts["model"]).read_text())
        predict, stats = bench.rebuild_from_snapshot(snapshot)
        with open(report.artifacts["predictions"], newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        x = body[:, header.index("x1")][:, None]
        pred = predict(x, flavor="observed")
        np.testing.assert_allclose(pred.mean, body[:, header.index("mean_norm")],
                                   atol=1e-9)
        np.testing.assert_allclose(pred.variance, body[:, header.index("var_norm")],
                                   atol=1e-9)

    def test_aggregation_snapshot_roundtrip(self, tmp_path):
        cfg = tiny_config(tmp_path / "run", method="rbcm", M=3)
        report = bench.run_experiment(cfg)
        snapshot = json.loads(Path(report.artifacts["model"]).read_text())
        predict, _ = bench.rebuild_from_snapshot(snapshot)
        pred = predict(np.array([[0.5]]), flavor="observed")
        assert np.isfinite(pred.mean[0]) and pred.variance[0] > 0


class TestCliCommands:
    def write_config(self, tmp_path, **overrides):
        lines = ["method = vfe", "generator = sinc", "n_train = 40",
                 "n_test = 50", "m = 6", "max_iters = 20", "plots = false",
                 f"out = {tmp_path / 'run'}"]
        for k, v in overrides.items():
            lines.append(f"{k} = {v}")
        path = tmp_path / "exp.cfg"
        path.write_text("\n".join(lines) + "\n")
        return path

    def test_fit_and_predict_roundtrip(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path)
        assert cli.main(["fit", "--config", str(cfg)]) == 0
        inputs = tmp_path / "inputs.csv"
        inputs.write_text("x\n0.0\n1.0\n-2.0\n")
        out_csv = tmp_path / "pred.csv"
        code = cli.main(["predict", "--model", str(tmp_path / "run" / "model.json"),
                         "--inputs", str(inputs), "--out", str(out_csv)])
        assert code == 0
        rows = list(csv.reader(open(out_csv)))
        assert rows[0] == ["x1", "mean_norm", "var_norm", "mean", "var"]
        assert len(rows) == 4

    def test_bench_writes_summary(self, tmp_path):
        cfg = self.write_config(tmp_path, max_iters=10)
        code = cli.main(["bench", "--config", str(cfg), "--seeds", "2",
                         "--out", str(tmp_path / "campaign")])
        assert code == 0
        summary = json.loads((tmp_path / "campaign" / "summary.json").read_text())
        assert summary["n_seeds"] == 2
        assert len(summary["runs"]) == 2
        assert (tmp_path / "campaign" / "seed00" / "report.json").is_file()

    def test_gen_sinc(self, tmp_path):
        assert cli.main(["gen-sinc", "--out", str(tmp_path / "toy"),
                         "--n-train", "10", "--n-test", "12"]) == 0
        rows = list(csv.reader(open(tmp_path / "toy" / "train.csv")))
        assert rows[0] == ["x", "y", "f"] and len(rows) == 11

    def test_exit_code_config_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("method = nonsense\ngenerator = sinc\n")
        assert cli.main(["fit", "--config", str(bad)]) == 1
        assert "config error" in capsys.readouterr().err

    def test_exit_code_io_error(self, tmp_path, capsys):
        assert cli.main(["fit", "--config", str(tmp_path / "missing.cfg")]) == 3

    def test_exit_code_numerical_failure(self, capsys):
        # an impossible tolerance forces the gradient gate to report failure
        assert cli.main(["gradcheck", "--tol", "1e-30"]) == 2

    def test_usage_error_is_config_error(self, capsys):
        assert cli.main(["fit"]) == 1  # missing --config

    def test_gradcheck_passes_at_default_tolerance(self, capsys):
        assert cli.main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "svgp_bound" in out and "full_nlml" in out
