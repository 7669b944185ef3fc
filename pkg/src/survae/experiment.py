"""Cross-validation protocol, results files, and baseline comparison."""

from __future__ import annotations

import csv
import json
import logging
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import SurvivalData, SynthTruth, kfold_split, stratified_holdout
from .metrics import evaluate_cdf, min_ranks, one_sided_p_value
from .model import SurvaeConfig, evaluate, train

log = logging.getLogger(__name__)

RESULTS_VERSION = "1.0"


@dataclass
class RunConfig:
    dataset: str = ""
    schema: str = ""
    model: SurvaeConfig = field(default_factory=SurvaeConfig)
    k: int = 5
    n_seeds: int = 10
    best_seeds: int = 3
    output_dir: str = "."
    grid_size: int = 100
    jobs: int = 1
    select_by: str = "validation"
    split_seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.best_seeds > self.n_seeds or self.best_seeds < 1:
            raise ValueError("best_seeds must be in [1, n_seeds]")
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.select_by not in ("validation", "test"):
            raise ValueError("select_by must be 'validation' or 'test'")

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("output_dir")
        d.pop("jobs")
        return d


def commit_id() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _mean(xs) -> float:
    return float(np.mean(xs))


def _fit_one(job: dict) -> dict:
    data: SurvivalData = job["data"]
    cfg: SurvaeConfig = job["config"]
    out = {"fold": job["fold"], "seed": cfg.seed}
    try:
        model, hist = train(data.subset(job["train"]), data.subset(job["val"]), cfg)
        val = evaluate(model, data.subset(job["val"]), job["grid_size"])
        test = evaluate(model, data.subset(job["test"]), job["grid_size"])
    except Exception as exc:  # recorded per job; the run continues
        log.exception("fold %d seed %d failed", job["fold"], cfg.seed)
        out["error"] = f"{type(exc).__name__}: {exc}"
        return out
    out.update(
        val_c_index=val["c_index"],
        val_ibs=val["ibs"],
        c_index=test["c_index"],
        ibs=test["ibs"],
        epochs=hist.epochs,
        best_epoch=hist.best_epoch,
        stop_reason=hist.stop_reason,
    )
    return out


def _score(run: dict, key: str) -> float:
    v = run.get(key)
    return -np.inf if v is None else v


def aggregate(runs: list[dict], k: int, best_seeds: int, select_by: str) -> tuple[list, dict]:
    """Per-fold means over the best seeds, then dataset-level mean/min/max."""
    key = "val_c_index" if select_by == "validation" else "c_index"
    folds = []
    for f in range(k):
        ok = [r for r in runs if r["fold"] == f and "error" not in r]
        if not ok:
            continue
        ranked = sorted(ok, key=lambda r: (-_score(r, key), r["seed"]))[:best_seeds]
        cs = [r["c_index"] for r in ranked if r["c_index"] is not None]
        folds.append({
            "fold": f,
            "selected_seeds": [r["seed"] for r in ranked],
            "c_index": _mean(cs) if cs else None,
            "ibs": _mean([r["ibs"] for r in ranked]),
        })
    summary = {}
    for metric in ("c_index", "ibs"):
        vals = [fd[metric] for fd in folds if fd[metric] is not None]
        summary[metric] = (
            {"mean": _mean(vals), "min": float(min(vals)), "max": float(max(vals))} if vals else None
        )
    return folds, summary


def run_cv(data: SurvivalData, rc: RunConfig) -> dict:
    plan = kfold_split(data, rc.k, rc.split_seed)
    jobs = []
    for f, (train_idx, test_idx) in enumerate(plan):
        keep, hold = stratified_holdout(data.events[train_idx], rc.val_fraction, rc.split_seed + 1000 + f)
        for s in range(rc.n_seeds):
            cfg = SurvaeConfig(**{**asdict(rc.model), "seed": rc.model.seed + s})
            jobs.append({
                "data": data, "config": cfg, "fold": f, "grid_size": rc.grid_size,
                "train": train_idx[keep], "val": train_idx[hold], "test": test_idx,
            })
    if rc.jobs > 1:
        with ProcessPoolExecutor(max_workers=rc.jobs) as pool:
            runs = list(pool.map(_fit_one, jobs))
    else:
        runs = [_fit_one(j) for j in jobs]
    runs.sort(key=lambda r: (r["fold"], r["seed"]))

    folds, summary = aggregate(runs, rc.k, rc.best_seeds, rc.select_by)
    failures = [
        {"fold": r["fold"], "seed": r["seed"], "error": r["error"]} for r in runs if "error" in r
    ]
    done = {fd["fold"] for fd in folds}
    failures += [{"fold": f, "seed": None, "error": "no successful seed"} for f in range(rc.k) if f not in done]
    return {
        "format_version": RESULTS_VERSION,
        "dataset": data.name,
        "time_unit": data.schema.time_unit,
        "n_subjects": len(data),
        "config": rc.echo(),
        "commit": commit_id(),
        "runs": runs,
        "folds": folds,
        "summary": summary,
        "status": "partial" if failures else "complete",
        "failures": failures,
    }


def oracle_cv(data: SurvivalData, truth: SynthTruth, k: int = 5, split_seed: int = 0, grid_size: int = 100) -> dict:
    """True-model C-index and IBS on the same test folds that :func:`run_cv` uses."""
    plan = kfold_split(data, k, split_seed)
    cs, ibss = [], []
    for _, test_idx in plan:
        sub = data.subset(test_idx)
        m = evaluate_cdf(lambda g: truth.cdf(g, test_idx), sub.times, sub.events, grid_size)
        cs.append(m["c_index"])
        ibss.append(m["ibs"])
    return {"c_index": _mean(cs), "ibs": _mean(ibss), "fold_c_index": cs, "fold_ibs": ibss}


# -- results files -----------------------------------------------------------


class ResultsError(ValueError):
    pass


def write_results(results: dict, path) -> None:
    Path(path).write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")


def load_results(path) -> dict:
    raw = json.loads(Path(path).read_text())
    version = str(raw.get("format_version", ""))
    if version.split(".")[0] != RESULTS_VERSION.split(".")[0]:
        raise ResultsError(f"{path}: unsupported results format version {version!r}")
    return raw


def recompute_aggregates(results: dict) -> tuple[list, dict]:
    cfg = results["config"]
    return aggregate(results["runs"], cfg["k"], cfg["best_seeds"], cfg["select_by"])


# -- comparison against external baselines ------------------------------------


class CompareError(ValueError):
    pass


COLUMNS = ("model", "dataset", "fold", "c_index", "ibs")


def read_fold_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise CompareError(f"{path}: missing columns {missing}")
        for n, row in enumerate(reader, start=1):
            try:
                rows.append({
                    "model": row["model"].strip(),
                    "dataset": row["dataset"].strip(),
                    "fold": int(row["fold"]),
                    "c_index": float(row["c_index"]) if row["c_index"].strip() else None,
                    "ibs": float(row["ibs"]) if row["ibs"].strip() else None,
                })
            except ValueError as exc:
                raise CompareError(f"{path}, row {n}: {exc}") from None
    return rows


def results_to_rows(results: dict, model_name: str) -> list[dict]:
    return [
        {"model": model_name, "dataset": results["dataset"], "fold": fd["fold"],
         "c_index": fd["c_index"], "ibs": fd["ibs"]}
        for fd in results["folds"]
    ]


def compare(rows: list[dict], candidate: str = "SURVAE") -> dict:
    """MRR per model and one-sided p-values of ``candidate`` against every other model.

    C-index is higher-is-better; IBS is lower-is-better and is negated before
    testing, so small p always favours the candidate.  Ranks on each dataset
    use the mean over folds with ties sharing the best rank.
    """
    table: dict = {}
    for r in rows:
        table.setdefault(r["model"], {}).setdefault(r["dataset"], []).append(r)
    if candidate not in table:
        raise CompareError(f"candidate model {candidate!r} not present")
    datasets = sorted(table[candidate])
    problems = []
    for model, per in table.items():
        extra, lacking = set(per) - set(datasets), set(datasets) - set(per)
        if extra:
            problems.append(f"{model}: datasets not in {candidate}: {sorted(extra)}")
        if lacking:
            problems.append(f"{model}: missing datasets: {sorted(lacking)}")
    if problems:
        raise CompareError("dataset mismatch:\n  " + "\n  ".join(problems))

    models = sorted(table)

    def values(model, ds, metric):
        return [r[metric] for r in sorted(table[model][ds], key=lambda r: r["fold"]) if r[metric] is not None]

    means = {m: {ds: {met: (_mean(values(m, ds, met)) if values(m, ds, met) else None)
                      for met in ("c_index", "ibs")} for ds in datasets} for m in models}
    mrr_out = {}
    for metric, higher in (("c_index", True), ("ibs", False)):
        recips = {m: [] for m in models}
        for ds in datasets:
            scored = [m for m in models if means[m][ds][metric] is not None]
            if not scored:
                continue
            ranks = min_ranks([means[m][ds][metric] for m in scored], higher_is_better=higher)
            for m, rk in zip(scored, ranks):
                recips[m].append(1.0 / rk)
        mrr_out[metric] = {m: (_mean(v) if v else None) for m, v in recips.items()}

    p_values = {"c_index": {}, "ibs": {}}
    for other in models:
        if other == candidate:
            continue
        for metric, sign in (("c_index", 1.0), ("ibs", -1.0)):
            p_values[metric][other] = {}
            for ds in datasets:
                a, b = values(candidate, ds, metric), values(other, ds, metric)
                p = None
                if len(a) >= 2 and len(b) >= 2:
                    p = one_sided_p_value(sign * np.array(a), sign * np.array(b))
                p_values[metric][other][ds] = p
    return {
        "candidate": candidate,
        "datasets": datasets,
        "models": models,
        "means": means,
        "mrr": mrr_out,
        "p_values": p_values,
        "tie_rule": "equal means share the best (minimum) rank; ranks use unrounded fold means",
    }


def format_compare(report: dict) -> str:
    lines = []
    models, datasets = report["models"], report["datasets"]
    for metric in ("c_index", "ibs"):
        lines.append(f"== mean {metric} ==")
        lines.append("dataset".ljust(12) + "".join(m[:10].rjust(11) for m in models))
        for ds in datasets:
            cells = []
            for m in models:
                v = report["means"][m][ds][metric]
                cells.append(("-" if v is None else f"{v:.3f}").rjust(11))
            lines.append(ds[:12].ljust(12) + "".join(cells))
        mrr = report["mrr"][metric]
        lines.append("MRR".ljust(12) + "".join(("-" if mrr[m] is None else f"{mrr[m]:.2f}").rjust(11) for m in models))
        lines.append(f"-- one-sided p-values, {report['candidate']} better ({metric}) --")
        others = [m for m in models if m != report["candidate"]]
        lines.append("model".ljust(12) + "".join(ds[:10].rjust(11) for ds in datasets))
        for o in others:
            row = report["p_values"][metric][o]
            lines.append(o[:12].ljust(12) + "".join(("-" if row[ds] is None else f"{row[ds]:.3f}").rjust(11) for ds in datasets))
        lines.append("")
    lines.append(f"tie rule: {report['tie_rule']}")
    return "\n".join(lines)


def format_results(results: dict) -> str:
    lines = [f"dataset {results['dataset']} ({results['n_subjects']} subjects), status {results['status']}"]
    lines.append("fold   c_index      ibs   seeds")
    for fd in results["folds"]:
        c = "-" if fd["c_index"] is None else f"{fd['c_index']:.4f}"
        lines.append(f"{fd['fold']:>4} {c:>9} {fd['ibs']:>8.4f}   {fd['selected_seeds']}")
    for metric in ("c_index", "ibs"):
        s = results["summary"][metric]
        if s:
            lines.append(f"{metric}: {s['mean']:.4f} ({s['min']:.4f}, {s['max']:.4f})")
    for fail in results["failures"]:
        lines.append(f"FAILED fold {fail['fold']} seed {fail['seed']}: {fail['error']}")
    return "\n".join(lines)
