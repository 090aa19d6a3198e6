"""Experiment orchestration: config parsing, the fit/predict/metrics
pipeline, machine-readable reports and model snapshots.

A run writes into its output directory:

    report.json       metrics, seeds, diagnostics and artifact paths
    predictions.csv   per test point: inputs, targets, mean and variance
                      in normalized and original units
    trace.csv         optimizer trace, two columns (iteration, objective)
    model.json        reload-able snapshot (hyperparameters, inducing
                      points, partition, variational state)
    prediction.png / trace.png   rendered figures (when plots = true)

All metrics are computed in normalized target space.  Failures surface with
the pipeline stage name and any partially written outputs are removed.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import aggregation, full, sparse, svgp
from .data import (Dataset, NormStats, apply_normalization, generate_sinc,
                   load_csv, normalize, split)
from .exceptions import ConfigError
from .kernel import Hyperparameters
from .metrics import msll, smse

METHODS = ("full", "sor", "dtc", "fitc", "pic", "vfe", "svgp",
           "poe", "gpoe", "bcm", "rbcm", "local")
SPARSE_METHODS = ("sor", "dtc", "fitc", "pic", "vfe")
AGG_METHODS = ("poe", "gpoe", "bcm", "rbcm", "local")


@dataclass
class ExperimentConfig:
    """One experiment; field names double as the config-file keys."""

    method: str = ""
    # data source: a CSV path plus target column, or a named generator
    data: Optional[str] = None
    target: Optional[str] = None
    generator: Optional[str] = None
    n_train: int = 120
    n_test: int = 300
    noise_var: float = 0.04
    train_lo: float = -4.0
    train_hi: float = 4.0
    test_lo: float = -7.0
    test_hi: float = 7.0
    test_fraction: float = 0.2
    seed: int = 0
    # model parameters
    m: int = 15
    trainable_z: bool = True
    z_init: str = "auto"          # auto | spaced | kmeans
    M: int = 10
    b: int = 30
    beta: Optional[str] = None    # default depends on the method
    mode: str = "shared"          # shared | individual
    # optimizer settings
    max_iters: int = 100
    svgp_iters: int = 1000
    step_rate: float = 0.1
    momentum: float = 0.9
    decay: float = 0.9
    grad_tol: float = 1e-6
    exact_cap: int = 10000
    # outputs
    out: str = "runs/run"
    plots: bool = True

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(
                f"method: unknown value {self.method!r} (choose from {', '.join(METHODS)})")
        if (self.data is None) == (self.generator is None):
            raise ConfigError("exactly one of 'data' and 'generator' must be set")
        if self.data is not None:
            if self.target is None:
                raise ConfigError("target: required when 'data' is a CSV path")
            if not Path(self.data).is_file():
                raise ConfigError(f"data: file not found: {self.data}")
        if self.generator is not None and self.generator != "sinc":
            raise ConfigError(f"generator: unknown value {self.generator!r} (only 'sinc')")
        if self.beta is not None and self.beta not in aggregation.BETA_RULES:
            raise ConfigError(
                f"beta: unknown rule {self.beta!r} (choose from {', '.join(aggregation.BETA_RULES)})")
        if self.mode not in ("shared", "individual"):
            raise ConfigError(f"mode: must be 'shared' or 'individual', got {self.mode!r}")
        if self.method in ("bcm", "rbcm") and self.mode == "individual":
            raise ConfigError(f"mode: {self.method} requires shared hyperparameters")
        if self.z_init not in ("auto", "spaced", "kmeans"):
            raise ConfigError(f"z_init: must be auto, spaced or kmeans, got {self.z_init!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction: must lie in (0, 1), got {self.test_fraction}")
        return self


_BOOL_KEYS = {"trainable_z", "plots"}
_INT_KEYS = {"n_train", "n_test", "seed", "m", "M", "b", "max_iters",
             "svgp_iters", "exact_cap"}
_FLOAT_KEYS = {"noise_var", "train_lo", "train_hi", "test_lo", "test_hi",
               "test_fraction", "step_rate", "momentum", "decay", "grad_tol"}


def parse_config_text(text, source="<config>") -> ExperimentConfig:
    """Parse the flat ``key = value`` config format ('#' starts a comment)."""
    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            if key in _BOOL_KEYS:
                if val.lower() not in ("true", "false"):
                    raise ValueError("expected true/false")
                values[key] = val.lower() == "true"
            elif key in _INT_KEYS:
                values[key] = int(val)
            elif key in _FLOAT_KEYS:
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return ExperimentConfig(**values).validate()


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IOError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))


@dataclass
class MetricsReport:
    """Machine-readable result of one experiment."""

    method: str
    params: dict
    seeds: dict
    smse: float
    msll: float
    train_time_s: float
    predict_time_s: float
    nlml_or_bound: float
    diagnostics: dict = field(default_factory=dict)
    data_info: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

def _load_stage(config: ExperimentConfig):
    if config.generator == "sinc":
        return generate_sinc(n_train=config.n_train, n_test=config.n_test,
                             train_range=(config.train_lo, config.train_hi),
                             test_range=(config.test_lo, config.test_hi),
                             noise_var=config.noise_var, seed=config.seed)
    raw = load_csv(config.data, config.target)
    return split(raw, config.test_fraction, config.seed)


def _init_inducing(X, config: ExperimentConfig) -> sparse.InducingSet:
    d = X.shape[1]
    mode = config.z_init
    if mode == "auto":
        mode = "spaced" if d == 1 else "kmeans"
    if mode == "spaced":
        if d != 1:
            raise ConfigError("z_init: 'spaced' initialization needs 1-d inputs")
        Z = np.linspace(X.min(), X.max(), config.m)[:, None]
    else:
        Z = aggregation.partition_kmeans(X, config.m, seed=config.seed).centroids
    return sparse.InducingSet(Z, trainable=config.trainable_z)


@dataclass
class _Fitted:
    predict: object                  # callable(Xstar, flavor) -> PredictiveDistribution
    nlml_or_bound: float
    noise_var: float
    trace: object = None
    diagnostics: dict = field(default_factory=dict)
    snapshot: dict = field(default_factory=dict)
    Z: Optional[np.ndarray] = None   # inducing locations in normalized space


def _fit_stage(config: ExperimentConfig, train: Dataset) -> _Fitted:
    hp0 = Hyperparameters.default(train.d)
    method = config.method

    if method == "full":
        model = full.fit(train, hp0, max_iters=config.max_iters,
                         grad_tol=config.grad_tol, exact_cap=config.exact_cap)
        return _Fitted(
            predict=lambda Xs, flavor: full.predict(model, Xs, flavor),
            nlml_or_bound=model.nlml, noise_var=model.hp.noise_var,
            trace=model.trace,
            diagnostics={"jitter_events": int(model.jitter > 0)},
            snapshot={"hp": model.hp.to_vector().tolist()})

    if method in SPARSE_METHODS:
        Z0 = _init_inducing(train.X, config)
        partition = None
        if method == "pic":
            partition = aggregation.partition_kmeans(train.X, config.M, seed=config.seed)
        model = sparse.fit_sparse(method, train, Z0, hp0,
                                  max_iters=config.max_iters,
                                  grad_tol=config.grad_tol, partition=partition)
        snap = {"hp": model.hp.to_vector().tolist(), "Z": model.Z.Z.tolist()}
        if partition is not None:
            snap["partition"] = _partition_to_dict(partition)
        return _Fitted(
            predict=lambda Xs, flavor: sparse.sparse_predict(model, Xs, flavor),
            nlml_or_bound=-model.evidence, noise_var=model.hp.noise_var,
            trace=model.trace,
            diagnostics={"jitter_events": model.jitter_events},
            snapshot=snap, Z=model.Z.Z)

    if method == "svgp":
        Z0 = _init_inducing(train.X, config)
        cfg = svgp.SvgpConfig(batch_size=min(config.b, train.n),
                              step_rate=config.step_rate, momentum=config.momentum,
                              decay=config.decay, max_iters=config.svgp_iters,
                              seed=config.seed)
        model = svgp.fit_svgp(train, Z0, hp0, cfg)
        return _Fitted(
            predict=lambda Xs, flavor: svgp.svgp_predict(model, Xs, flavor),
            nlml_or_bound=-model.bound, noise_var=model.hp.noise_var,
            trace=model.trace, diagnostics={},
            snapshot={"hp": model.hp.to_vector().tolist(), "Z": model.Z.Z.tolist(),
                      "var_mean": model.vs.var_mean.tolist(),
                      "cov_factor": model.vs.cov_factor.tolist()},
            Z=model.Z.Z)

    # aggregation family
    partition = aggregation.partition_kmeans(train.X, config.M, seed=config.seed)
    mode = "shared_hp" if config.mode == "shared" else "individual_hp"
    ensemble = aggregation.fit_experts(train, partition, mode, hp0,
                                       max_iters=config.max_iters,
                                       grad_tol=config.grad_tol)
    live = [e for e in ensemble.experts if e is not None]
    total_nlml = float(sum(e.nlml for e in live))
    beta = config.beta or aggregation.DEFAULT_BETA.get(method)
    if method == "local":
        predictor = lambda Xs, flavor: aggregation.predict_local(ensemble, Xs, flavor)
    else:
        predictor = lambda Xs, flavor: aggregation.predict_aggregated(
            ensemble, Xs, method, beta_rule=beta, flavor=flavor)
    snap = {"partition": _partition_to_dict(partition), "mode": mode, "beta": beta}
    if mode == "shared_hp":
        snap["hp"] = ensemble.hp_shared.to_vector().tolist()
    else:
        snap["experts_hp"] = [None if e is None else e.hp.to_vector().tolist()
                              for e in ensemble.experts]
    return _Fitted(
        predict=predictor, nlml_or_bound=total_nlml,
        noise_var=ensemble.noise_var(), trace=ensemble.trace,
        diagnostics={"excluded_experts": list(ensemble.excluded)},
        snapshot=snap)


def _partition_to_dict(p: aggregation.Partition) -> dict:
    return {"assignments": p.assignments.tolist(),
            "centroids": p.centroids.tolist(), "M": p.M}


def _partition_from_dict(d) -> aggregation.Partition:
    return aggregation.Partition(assignments=np.array(d["assignments"], dtype=int),
                                 centroids=np.array(d["centroids"]), M=int(d["M"]))


def _stats_to_dict(s: NormStats) -> dict:
    return {"x_mean": s.x_mean.tolist(), "x_std": s.x_std.tolist(),
            "y_mean": s.y_mean, "y_std": s.y_std,
            "kept_columns": s.kept_columns.tolist(), "n_columns": s.n_columns}


def _stats_from_dict(d) -> NormStats:
    return NormStats(x_mean=np.array(d["x_mean"]), x_std=np.array(d["x_std"]),
                     y_mean=float(d["y_mean"]), y_std=float(d["y_std"]),
                     kept_columns=np.array(d["kept_columns"], dtype=int),
                     n_columns=int(d["n_columns"]))


# ---------------------------------------------------------------------------
# running and reporting
# ---------------------------------------------------------------------------

def run_experiment(config: ExperimentConfig) -> MetricsReport:
    """Execute load -> split -> normalize -> fit -> predict -> metrics and
    write the report, prediction/trace CSVs, snapshot and figures."""
    config.validate()
    written = []
    stage = "load"
    try:
        train_raw, test_raw = _load_stage(config)
        stage = "normalize"
        train = normalize(train_raw)
        stats = train.norm_stats
        test = apply_normalization(test_raw, stats)
        stage = "fit"
        t0 = time.perf_counter()
        fitted = _fit_stage(config, train)
        train_time = time.perf_counter() - t0
        stage = "predict"
        t0 = time.perf_counter()
        pred_lat = fitted.predict(test.X, "latent")
        pred_obs = fitted.predict(test.X, "observed")
        predict_time = time.perf_counter() - t0
        stage = "metrics"
        report = _metrics_stage(config, fitted, train, test, pred_lat, pred_obs,
                                train_time, predict_time)
        stage = "write"
        _write_stage(config, report, fitted, train, test, pred_obs, stats, written)
        return report
    except Exception as exc:
        for path in written:
            try:
                Path(path).unlink()
            except OSError:
                pass
        if exc.args and isinstance(exc.args[0], str):
            exc.args = (f"stage {stage!r}: {exc.args[0]}",) + exc.args[1:]
        raise


def _metrics_stage(config, fitted, train, test, pred_lat, pred_obs,
                   train_time, predict_time) -> MetricsReport:
    y_var = float(train.y.var(ddof=1))
    y_mean = float(train.y.mean())
    smse_val = smse(test.y, pred_obs.mean, y_var)
    msll_val = msll(test.y, pred_obs.mean, np.maximum(pred_obs.variance, 1e-300),
                    y_mean, y_var)
    stats = train.norm_stats
    diagnostics = dict(fitted.diagnostics)
    for pred in (pred_lat, pred_obs):
        for key, val in pred.diagnostics.items():
            # latent and observed calls repeat the same work; keep the max
            # per-call count rather than double counting
            if isinstance(val, (int, np.integer)):
                diagnostics[key] = max(diagnostics.get(key, 0), int(val))
            else:
                diagnostics.setdefault(key, val)
    diagnostics["sigma_eps2_estimated_normalized"] = fitted.noise_var
    diagnostics["sigma_eps2_estimated"] = fitted.noise_var * stats.y_std**2
    if test.latent_y is not None:
        lo, hi = train.X.min(axis=0), train.X.max(axis=0)
        inside = np.all((test.X >= lo) & (test.X <= hi), axis=1)
        if np.any(inside):
            diagnostics["smse_latent_inrange"] = smse(
                test.latent_y[inside], pred_lat.mean[inside], y_var)
    params = {"m": config.m, "M": config.M, "b": config.b,
              "beta": config.beta, "mode": config.mode,
              "trainable_z": config.trainable_z, "max_iters": config.max_iters,
              "svgp_iters": config.svgp_iters, "step_rate": config.step_rate,
              "momentum": config.momentum, "decay": config.decay}
    data_info = {"source": config.data or f"generator:{config.generator}",
                 "n_train": train.n, "n_test": test.n, "d": train.d}
    return MetricsReport(method=config.method, params=params,
                         seeds={"seed": config.seed},
                         smse=smse_val, msll=msll_val,
                         train_time_s=train_time, predict_time_s=predict_time,
                         nlml_or_bound=fitted.nlml_or_bound,
                         diagnostics=diagnostics, data_info=data_info)


def _write_stage(config, report, fitted, train, test, pred_obs, stats, written):
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)

    pred_path = out / "predictions.csv"
    _write_predictions(pred_path, test, pred_obs, stats)
    written.append(pred_path)

    trace_path = None
    if fitted.trace is not None and fitted.trace.iterations:
        trace_path = out / "trace.csv"
        with open(trace_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective"])
            for row in fitted.trace.iterations:
                w.writerow([row[0], repr(row[1])])
        written.append(trace_path)

    model_path = out / "model.json"
    snapshot = {"method": config.method, "norm_stats": _stats_to_dict(stats),
                "dataset": {"data": config.data, "target": config.target,
                            "generator": config.generator,
                            "n_train": config.n_train, "n_test": config.n_test,
                            "noise_var": config.noise_var,
                            "train_lo": config.train_lo, "train_hi": config.train_hi,
                            "test_lo": config.test_lo, "test_hi": config.test_hi,
                            "test_fraction": config.test_fraction},
                "seed": config.seed}
    snapshot.update(fitted.snapshot)
    model_path.write_text(json.dumps(snapshot, indent=1), encoding="utf-8")
    written.append(model_path)

    report.artifacts = {"predictions": str(pred_path), "model": str(model_path)}
    if trace_path is not None:
        report.artifacts["trace"] = str(trace_path)

    if config.plots:
        from . import plots
        fig_path = out / "prediction.png"
        Z_orig = None
        if fitted.Z is not None and train.d == 1:
            Z_orig = fitted.Z * stats.x_std + stats.x_mean
        plots.prediction_figure(fig_path, train, test, pred_obs, stats, Z=Z_orig)
        written.append(fig_path)
        report.artifacts["prediction_figure"] = str(fig_path)
        if fitted.trace is not None and fitted.trace.iterations:
            tfig_path = out / "trace.png"
            plots.trace_figure(tfig_path, fitted.trace)
            written.append(tfig_path)
            report.artifacts["trace_figure"] = str(tfig_path)

    report_path = out / "report.json"
    report_path.write_text(json.dumps(report.to_dict(), indent=1), encoding="utf-8")
    written.append(report_path)
    report.artifacts["report"] = str(report_path)


def _write_predictions(path, test, pred_obs, stats):
    d = test.d
    mean_orig = stats.undo_y_mean(pred_obs.mean)
    var_orig = stats.undo_y_var(pred_obs.variance)
    X_orig = test.X * stats.x_std + stats.x_mean
    y_orig = test.y * stats.y_std + stats.y_mean
    header = [f"x{i+1}" for i in range(d)] + ["y"]
    cols = [X_orig[:, i] for i in range(d)] + [y_orig]
    if test.latent_y is not None:
        header.append("y_latent")
        cols.append(test.latent_y * stats.y_std + stats.y_mean)
    header += ["mean_norm", "var_norm", "mean", "var"]
    cols += [pred_obs.mean, pred_obs.variance, mean_orig, var_orig]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(test.n):
            w.writerow([repr(float(c[i])) for c in cols])


# ---------------------------------------------------------------------------
# snapshot reload + prediction without refitting
# ---------------------------------------------------------------------------

def rebuild_from_snapshot(snapshot: dict):
    """Reconstruct a predictor from a model.json snapshot.

    Returns ``(predict, stats)`` where ``predict(X_orig, flavor)`` takes
    inputs in original units and returns a PredictiveDistribution in
    normalized target units.
    """
    method = snapshot["method"]
    stats = _stats_from_dict(snapshot["norm_stats"])
    ds = snapshot["dataset"]
    cfg = ExperimentConfig(method=method, data=ds.get("data"), target=ds.get("target"),
                           generator=ds.get("generator"), n_train=ds.get("n_train", 120),
                           n_test=ds.get("n_test", 300), noise_var=ds.get("noise_var", 0.04),
                           train_lo=ds.get("train_lo", -4.0), train_hi=ds.get("train_hi", 4.0),
                           test_lo=ds.get("test_lo", -7.0), test_hi=ds.get("test_hi", 7.0),
                           test_fraction=ds.get("test_fraction", 0.2),
                           seed=snapshot["seed"]).validate()
    train_raw, _ = _load_stage(cfg)
    train = apply_normalization(train_raw, stats)

    if method == "full":
        hp = Hyperparameters.from_vector(np.array(snapshot["hp"]))
        model = full.build(train, hp)
        core = lambda Xn, flavor: full.predict(model, Xn, flavor)
    elif method in SPARSE_METHODS:
        hp = Hyperparameters.from_vector(np.array(snapshot["hp"]))
        Z = sparse.InducingSet(np.array(snapshot["Z"]), trainable=False)
        partition = (_partition_from_dict(snapshot["partition"])
                     if "partition" in snapshot else None)
        model = sparse.build_sparse(method, train, Z, hp, partition=partition)
        core = lambda Xn, flavor: sparse.sparse_predict(model, Xn, flavor)
    elif method == "svgp":
        hp = Hyperparameters.from_vector(np.array(snapshot["hp"]))
        Z = sparse.InducingSet(np.array(snapshot["Z"]), trainable=False)
        vs = svgp.VariationalState(np.array(snapshot["var_mean"]),
                                   np.array(snapshot["cov_factor"]))
        core = lambda Xn, flavor: svgp.svgp_predict((Z, hp, vs), Xn, flavor)
    elif method in AGG_METHODS:
        partition = _partition_from_dict(snapshot["partition"])
        mode = snapshot["mode"]
        experts = []
        for k in range(partition.M):
            idx = partition.indices(k)
            sub = Dataset(train.X[idx], train.y[idx])
            if mode == "shared_hp":
                hp_k = Hyperparameters.from_vector(np.array(snapshot["hp"]))
            else:
                vec = snapshot["experts_hp"][k]
                if vec is None:
                    experts.append(None)
                    continue
                hp_k = Hyperparameters.from_vector(np.array(vec))
            experts.append(full.build(sub, hp_k))
        hp_shared = (Hyperparameters.from_vector(np.array(snapshot["hp"]))
                     if mode == "shared_hp" else None)
        excluded = [k for k, e in enumerate(experts) if e is None]
        ensemble = aggregation.ExpertEnsemble(experts=experts, partition=partition,
                                              mode=mode, hp_shared=hp_shared,
                                              excluded=excluded)
        if method == "local":
            core = lambda Xn, flavor: aggregation.predict_local(ensemble, Xn, flavor)
        else:
            core = lambda Xn, flavor: aggregation.predict_aggregated(
                ensemble, Xn, method, beta_rule=snapshot.get("beta"), flavor=flavor)
    else:
        raise ConfigError(f"snapshot has unknown method {method!r}")

    def predict(X_orig, flavor="observed"):
        return core(stats.apply_x(X_orig), flavor)

    return predict, stats
