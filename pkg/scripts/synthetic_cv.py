"""Synthetic Weibull benchmark: cross-validated model vs the generating model.

    python3 scripts/synthetic_cv.py --out runs/synth [--jobs 4] [--lr 3e-3 --patience 30]
"""

import argparse
import json
import time
from pathlib import Path

from survae import experiment as exp
from survae.data import SynthSpec, synth_generate
from survae.model import SurvaeConfig


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="runs/synth")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--best", type=int, default=3)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=50)
    args = p.parse_args()

    data, truth = synth_generate(SynthSpec(n=args.n, seed=args.seed))
    oracle = exp.oracle_cv(data, truth, k=args.k)
    rc = exp.RunConfig(dataset="synthetic", model=SurvaeConfig(lr=args.lr, patience=args.patience),
                       k=args.k, n_seeds=args.seeds, best_seeds=args.best, jobs=args.jobs,
                       output_dir=args.out)
    t0 = time.time()
    results = exp.run_cv(data, rc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    exp.write_results(results, out / "results.json")
    print(exp.format_results(results))
    s = results["summary"]
    summary = {
        "c_index": s["c_index"]["mean"], "oracle_c_index": oracle["c_index"],
        "ibs": s["ibs"]["mean"], "oracle_ibs": oracle["ibs"],
        "censored_fraction": data.censored_fraction, "seconds": round(time.time() - t0, 1),
    }
    (out / "oracle.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
