"""Command-line interface.

Subcommands: ``fit`` (train a model and save its report), ``predict``
(reload a snapshot and emit a prediction CSV), ``bench`` (multi-seed
campaign), ``gradcheck`` (finite-difference certification of every analytic
gradient) and ``gen-sinc`` (emit the toy CSVs).

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench
from .exceptions import ConfigError, DimensionError, NumericalError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser():
    p = _Parser(prog="scalegp",
                description="Scalable Gaussian-process regression benchmark harness")
    sub = p.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="train a model from a config file")
    fit.add_argument("--config", required=True, help="key = value config file")
    fit.add_argument("--out", help="override the output directory")
    fit.add_argument("--seed", type=int, help="override the run seed")

    pred = sub.add_parser("predict", help="predict from a saved model snapshot")
    pred.add_argument("--model", required=True, help="model.json from a fit run")
    pred.add_argument("--inputs", required=True,
                      help="CSV of feature columns (same order as training)")
    pred.add_argument("--out", required=True, help="output prediction CSV path")

    b = sub.add_parser("bench", help="multi-seed campaign from one config")
    b.add_argument("--config", required=True)
    b.add_argument("--seeds", type=int, default=10, help="run seeds 0..N-1")
    b.add_argument("--out", help="override the campaign output directory")

    g = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("gen-sinc", help="emit the sinc toy train/test CSVs")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-train", type=int, default=120)
    s.add_argument("--n-test", type=int, default=300)
    s.add_argument("--noise-var", type=float, default=0.04)
    return p


def _cmd_fit(args) -> int:
    config = bench.load_config(args.config)
    if args.out:
        config = replace(config, out=args.out)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    report = bench.run_experiment(config)
    print(f"method={report.method} seed={report.seeds['seed']} "
          f"smse={report.smse:.4f} msll={report.msll:.4f} "
          f"nlml_or_bound={report.nlml_or_bound:.3f}")
    print(f"report: {report.artifacts['report']}")
    return 0


def _cmd_predict(args) -> int:
    try:
        snapshot = json.loads(Path(args.model).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IOError(f"cannot read {args.model}: {exc}") from exc
    predict, stats = bench.rebuild_from_snapshot(snapshot)
    X = _read_feature_csv(args.inputs)
    pred = predict(X, flavor="observed")
    mean = stats.undo_y_mean(pred.mean)
    var = stats.undo_y_var(pred.variance)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i+1}" for i in range(X.shape[1])]
                   + ["mean_norm", "var_norm", "mean", "var"])
        for i in range(X.shape[0]):
            w.writerow([repr(float(v)) for v in X[i]]
                       + [repr(float(pred.mean[i])), repr(float(pred.variance[i])),
                          repr(float(mean[i])), repr(float(var[i]))])
    print(f"wrote {out} ({X.shape[0]} predictions)")
    return 0


def _read_feature_csv(path) -> np.ndarray:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IOError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ConfigError(f"{path}: file is empty")
        rows = []
        for r, row in enumerate(reader, start=2):
            if not row or all(c.strip() == "" for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ConfigError(f"{path}: non-numeric cell at row {r}") from None
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    return np.array(rows, dtype=float)


def _cmd_bench(args) -> int:
    config = bench.load_config(args.config)
    base_out = Path(args.out or config.out)
    runs = []
    for seed in range(args.seeds):
        cfg = replace(config, seed=seed, out=str(base_out / f"seed{seed:02d}"))
        report = bench.run_experiment(cfg)
        runs.append(report.to_dict())
        print(f"seed {seed}: smse={report.smse:.4f} msll={report.msll:.4f}")
    smses = np.array([r["smse"] for r in runs])
    mslls = np.array([r["msll"] for r in runs])
    summary = {
        "method": config.method, "n_seeds": args.seeds,
        "smse_mean": float(smses.mean()), "smse_std": float(smses.std(ddof=1)) if len(runs) > 1 else 0.0,
        "msll_mean": float(mslls.mean()), "msll_std": float(mslls.std(ddof=1)) if len(runs) > 1 else 0.0,
        "runs": runs,
    }
    base_out.mkdir(parents=True, exist_ok=True)
    summary_path = base_out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=1), encoding="utf-8")
    print(f"summary: {summary_path} "
          f"(smse {summary['smse_mean']:.4f} +/- {summary['smse_std']:.4f})")
    return 0


def _cmd_gradcheck(args) -> int:
    from .aggregation import partition_random
    from .data import Dataset
    from .kernel import Hyperparameters
    from .optimize import check_gradient
    from . import full, sparse, svgp

    rng = np.random.default_rng(args.seed)
    n, d, m = 40, 2, 7
    X = rng.normal(size=(n, d))
    y = rng.normal(size=n)
    data = Dataset(X, y)
    Z = X[rng.choice(n, m, replace=False)] + 0.1 * rng.normal(size=(m, d))
    hp = Hyperparameters(np.log(rng.uniform(0.5, 2.0, size=d)),
                         np.log(rng.uniform(0.5, 2.0)), np.log(rng.uniform(0.05, 0.3)))
    partition = partition_random(X, 4, seed=args.seed)
    results = {}

    results["full_nlml"] = check_gradient(
        lambda v: full.nlml(data, Hyperparameters.from_vector(v)), hp.to_vector())

    x0 = np.concatenate([hp.to_vector(), Z.ravel()])
    for method in sparse.METHODS:
        part = partition if method == "pic" else None

        def obj(v, _method=method, _part=part):
            hpv = Hyperparameters.from_vector(v[:d + 2])
            val, grad = sparse.sparse_evidence(_method, data, v[d + 2:].reshape(m, d),
                                               hpv, partition=_part, with_z=True)
            return -val, -grad

        results[f"evidence_{method}"] = check_gradient(obj, x0)

    Lf = np.tril(rng.normal(size=(m, m)) * 0.3)
    np.fill_diagonal(Lf, np.abs(np.diag(Lf)) + 0.5)
    vs = svgp.VariationalState(rng.normal(size=m), Lf)
    objective = svgp.elbo_objective(data, sparse.InducingSet(Z), train_z=True)
    xv = svgp._pack(hp, sparse.InducingSet(Z), vs, True)
    results["svgp_bound"] = check_gradient(lambda v: objective(v, None), xv)

    worst = max(results.values())
    for name, err in results.items():
        flag = "ok" if err < args.tol else "FAIL"
        print(f"{name:18s} max rel err = {err:.3e}  [{flag}]")
    if worst >= args.tol:
        raise NumericalError(f"gradient check failed: worst error {worst:.3e} >= {args.tol}")
    print(f"all gradients within {args.tol}")
    return 0


def _cmd_gen_sinc(args) -> int:
    from .data import generate_sinc
    train, test = generate_sinc(n_train=args.n_train, n_test=args.n_test,
                                noise_var=args.noise_var, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in (("train.csv", train), ("test.csv", test)):
        with open(out / name, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "f"])
            for i in range(ds.n):
                w.writerow([repr(float(ds.X[i, 0])), repr(float(ds.y[i])),
                            repr(float(ds.latent_y[i]))])
    print(f"wrote {out / 'train.csv'} and {out / 'test.csv'}")
    return 0


_COMMANDS = {"fit": _cmd_fit, "predict": _cmd_predict, "bench": _cmd_bench,
             "gradcheck": _cmd_gradcheck, "gen-sinc": _cmd_gen_sinc}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except (ConfigError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
