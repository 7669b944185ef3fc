"""Five-fold runs on user-supplied public datasets, checked against fold-range bands.

    python3 scripts/public_datasets.py --gbsg gbsg.csv --metabric metabric.csv --flchain flchain.csv --jobs 4

Schemas come from schemas/<name>.yaml.  Library defaults are used for the
model unless overridden with --config.
"""

import argparse
import json
import sys
from pathlib import Path

from survae import cli

ROOT = Path(__file__).resolve().parents[1]

# (C-index band, IBS band or None)
BANDS = {
    "gbsg": ((0.62, 0.72), (0.14, 0.22)),
    "metabric": ((0.53, 0.70), None),
    "flchain": ((0.75, 0.83), None),
}


def main():
    p = argparse.ArgumentParser()
    for name in BANDS:
        p.add_argument(f"--{name}")
    p.add_argument("--out", default="runs/public")
    p.add_argument("--jobs", default="1")
    p.add_argument("--config")
    args = p.parse_args()
    failed = False
    for name, (c_band, i_band) in BANDS.items():
        csv = getattr(args, name)
        if not csv:
            continue
        out = Path(args.out) / name
        argv = ["cv", "--data", csv, "--schema", str(ROOT / "schemas" / f"{name}.yaml"), "--out", str(out),
                "--k", "5", "--seeds", "10", "--best", "3", "--jobs", args.jobs]
        if args.config:
            argv += ["--config", args.config]
        cli.main(argv)
        s = json.loads((out / "results.json").read_text())["summary"]
        c, i = s["c_index"]["mean"], s["ibs"]["mean"]
        ok = c_band[0] <= c <= c_band[1] and (i_band is None or i_band[0] <= i <= i_band[1])
        failed |= not ok
        print(f"{name}: C {c:.3f} band {c_band}, IBS {i:.3f} band {i_band} -> {'ok' if ok else 'OUT OF BAND'}")
    sys.exit(1 if failed else 0)


if __name__ == "__main__":
    main()
