"""Command-line entry point: ``survae {cv,train,eval,synth,compare}``.

Settings resolve as: explicit flag > ``--config`` YAML file > default.  The
default output directory comes from ``$SURVAE_OUTPUT_DIR`` when set.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import experiment as exp
from .data import (
    DataError,
    SurvivalData,
    SynthSpec,
    load_dataset,
    load_schema,
    save_schema,
    save_truth,
    stratified_holdout,
    synth_generate,
    write_dataset,
)
from .distributions import TimeParams, weibull_cdf
from .metrics import evaluate_cdf
from .model import ModelFileError, SurvaeConfig, evaluate, load_model, predict, save_model, train

log = logging.getLogger("survae")

MODEL_FLAGS = {
    "latent_dim": int,
    "hidden_width": int,
    "keep_prob": float,
    "max_epochs": int,
    "batch_size": int,
    "lr": float,
    "patience": int,
    "min_delta": float,
    "time_family": str,
    "seed": int,
    "predict_samples": int,
}


def _default_out() -> str:
    return os.environ.get("SURVAE_OUTPUT_DIR", "survae-out")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    for name, typ in MODEL_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=False, help="dataset CSV")
    p.add_argument("--schema", required=False, help="schema YAML")


def _resolve(args: argparse.Namespace, keys, defaults: dict) -> dict:
    """Merge flag values over the config file over ``defaults``."""
    file_cfg = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_cfg = yaml.safe_load(fh) or {}
    model_file = file_cfg.pop("model", {}) or {}
    out = dict(defaults)
    for k in keys:
        if k in file_cfg:
            out[k] = file_cfg[k]
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    model = {}
    for k in MODEL_FLAGS:
        if k in model_file:
            model[k] = model_file[k]
        if k in file_cfg:
            model[k] = file_cfg[k]
        v = getattr(args, k, None)
        if v is not None:
            model[k] = v
    out["model"] = SurvaeConfig(**model)
    return out


def _load(args, data_path, schema_path) -> SurvivalData:
    if not data_path or not schema_path:
        raise DataError("--data and --schema are required")
    return load_dataset(data_path, schema_path)


# -- commands ----------------------------------------------------------------


def cmd_cv(args) -> int:
    keys = ["data", "schema", "k", "n_seeds", "best_seeds", "output_dir", "grid_size",
            "jobs", "select_by", "split_seed", "val_fraction"]
    cfg = _resolve(args, keys, {"output_dir": _default_out()})
    data_path = cfg.pop("data", None)
    data = _load(args, data_path, cfg.get("schema"))
    rc = exp.RunConfig(dataset=str(data_path), **cfg)
    out = Path(rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    results = exp.run_cv(data, rc)
    exp.write_results(results, out / "results.json")
    (out / "run_meta.json").write_text(json.dumps({"wall_clock_seconds": time.time() - t0}) + "\n")
    print(exp.format_results(results))
    return 0 if results["status"] == "complete" else 1


def cmd_train(args) -> int:
    keys = ["data", "schema", "output_dir", "val_fraction", "test_fraction", "split_seed", "grid_size"]
    cfg = _resolve(args, keys, {"output_dir": _default_out(), "val_fraction": 0.2,
                                "test_fraction": 0.0, "split_seed": 0, "grid_size": 100})
    data = _load(args, cfg["data"], cfg["schema"])
    if not 0 <= cfg["test_fraction"] < 1 or not 0 < cfg["val_fraction"] < 1:
        raise DataError("split fractions must lie in [0, 1) (test) and (0, 1) (validation)")
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    pool = np.arange(len(data))
    test_idx = None
    if cfg["test_fraction"] > 0:
        keep, test_idx = stratified_holdout(data.events, cfg["test_fraction"], cfg["split_seed"])
        pool = keep
    keep, hold = stratified_holdout(data.events[pool], cfg["val_fraction"], cfg["split_seed"] + 1)
    model, hist = train(data.subset(pool[keep]), data.subset(pool[hold]), cfg["model"])
    save_model(model, out / "model.json")
    (out / "history.json").write_text(json.dumps(hist.to_dict()) + "\n")
    report = {"epochs": hist.epochs, "best_epoch": hist.best_epoch, "stop_reason": hist.stop_reason}
    if test_idx is not None:
        test = data.subset(test_idx)
        write_dataset(test, out / "test.csv")
        report["test"] = evaluate(model, test, cfg["grid_size"])
    (out / "metrics.json").write_text(json.dumps(report, indent=1) + "\n")
    print(json.dumps(report, indent=1))
    return 0


def _read_predictions(path, n: int) -> TimeParams:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != n:
        raise DataError(f"{path}: {len(rows)} predictions for {n} subjects")
    lam = np.array([float(r["lambda"]) for r in rows])
    alpha = np.array([float(r.get("alpha") or 1.0) for r in rows])
    return TimeParams(lam, alpha)


def cmd_eval(args) -> int:
    schema = load_schema(args.schema)
    if bool(args.model) == bool(args.predictions):
        raise DataError("give exactly one of --model or --predictions")
    if args.model:
        model = load_model(args.model, expected_schema=schema)
        data = load_dataset(args.data, schema, levels=model.levels)
        tp = predict(model, data)
        metrics = evaluate(model, data, args.grid_size)
    else:
        data = load_dataset(args.data, schema)
        tp = _read_predictions(args.predictions, len(data))
        a, lm = np.broadcast_to(tp.alpha, tp.lam.shape)[:, None], tp.lam[:, None]
        metrics = evaluate_cdf(lambda g: weibull_cdf(g[None, :], a, lm), data.times, data.events, args.grid_size)
    alpha = np.broadcast_to(tp.alpha, tp.lam.shape)
    lam = tp.lam
    report = {"n_subjects": len(data), "time_unit": schema.time_unit, **metrics}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=1) + "\n")
        with open(out / "predictions.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["alpha", "lambda", "time_unit"])
            for a, lm in zip(alpha, lam):
                w.writerow([repr(float(a)), repr(float(lm)), schema.time_unit])
    print(json.dumps(report, indent=1))
    return 0


def cmd_synth(args) -> int:
    beta = tuple(float(b) for b in args.beta.split(",")) if args.beta else SynthSpec().beta[: args.p]
    if len(beta) < args.p:
        beta = beta + (0.0,) * (args.p - len(beta))
    spec = SynthSpec(args.n, args.p, beta, args.alpha, args.lambda0, args.censoring, args.seed)
    data, truth = synth_generate(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(data, out)
    save_schema(data.schema, out.with_suffix(".schema.yaml"))
    oracle = evaluate_cdf(lambda g: truth.cdf(g), data.times, data.events)
    save_truth(truth, out.with_suffix(".truth.json"), {
        "oracle_c_index": oracle["c_index"],
        "oracle_ibs": oracle["ibs"],
        "censored_fraction": data.censored_fraction,
    })
    print(json.dumps({"n": len(data), "censored_fraction": data.censored_fraction,
                      "oracle_c_index": oracle["c_index"], "oracle_ibs": oracle["ibs"]}, indent=1))
    return 0


def cmd_compare(args) -> int:
    rows = exp.read_fold_csv(args.external)
    for path in args.results or []:
        rows += exp.results_to_rows(exp.load_results(path), args.candidate)
    try:
        report = exp.compare(rows, args.candidate)
    except exp.CompareError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(exp.format_compare(report))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="survae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cv", help="k-fold cross-validation over several seeds")
    _add_data_flags(p)
    p.add_argument("--config")
    p.add_argument("--k", type=int)
    p.add_argument("--seeds", dest="n_seeds", type=int)
    p.add_argument("--best", dest="best_seeds", type=int)
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--grid-size", dest="grid_size", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--select-by", dest="select_by", choices=["validation", "test"])
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    _add_model_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("train", help="train one model on an explicit split")
    _add_data_flags(p)
    p.add_argument("--config")
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--grid-size", dest="grid_size", type=int)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics for a saved model or a predictions file")
    _add_data_flags(p)
    p.add_argument("--model")
    p.add_argument("--predictions", help="CSV with alpha,lambda columns in original time units")
    p.add_argument("--grid-size", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic Weibull dataset")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--p", type=int, default=5)
    p.add_argument("--beta", help="comma-separated coefficients")
    p.add_argument("--alpha", type=float, default=1.5)
    p.add_argument("--lambda0", type=float, default=1.0)
    p.add_argument("--censoring", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compare", help="MRR and p-value tables against baseline fold results")
    p.add_argument("--external", required=True, help="CSV: model,dataset,fold,c_index,ibs")
    p.add_argument("--results", nargs="*", help="results.json files from cv runs")
    p.add_argument("--candidate", default="SURVAE")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, ModelFileError, exp.ResultsError, exp.CompareError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
