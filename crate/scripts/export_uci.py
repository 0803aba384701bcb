#!/usr/bin/env python3
"""Export the UCI diabetes regression table bundled with scikit-learn as CSV.

The file ships with scikit-learn, so no download is needed. Features are the
ten raw baseline variables (age, sex, bmi, bp, s1..s6); the target is the
one-year disease progression score.

Usage: export_uci.py OUT_DIR
"""
import sys
from pathlib import Path

from sklearn.datasets import load_diabetes


def main():
    out = Path(sys.argv[1])
    out.mkdir(parents=True, exist_ok=True)
    d = load_diabetes(scaled=False)
    cols = list(d.feature_names) + ["target"]
    with open(out / "diabetes.csv", "w") as f:
        f.write(",".join(cols) + "\n")
        for row, t in zip(d.data, d.target):
            f.write(",".join(repr(float(v)) for v in row) + "," + repr(float(t)) + "\n")


if __name__ == "__main__":
    main()
