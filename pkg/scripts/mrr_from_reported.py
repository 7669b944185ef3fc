"""MRR and mean tables from the reported per-dataset means in data/reported_means.csv.

Each model has a single row per dataset there, so p-values are not defined
and print as '-'.
"""

import sys
from pathlib import Path

from survae import experiment as exp

ROOT = Path(__file__).resolve().parents[1]


def main():
    path = sys.argv[1] if len(sys.argv) > 1 else ROOT / "data" / "reported_means.csv"
    report = exp.compare(exp.read_fold_csv(path), "SURVAE")
    print(exp.format_compare(report))


if __name__ == "__main__":
    main()
