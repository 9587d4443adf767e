"""Shared CSV loading and argument handling for the plot scripts."""

import argparse
import csv
import sys
from pathlib import Path


def parse_args(description: str) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=description)
    parser.add_argument("--in", dest="input", required=True, help="input CSV")
    parser.add_argument("--out", dest="output", required=True, help="output image")
    return parser.parse_args()


def load_rows(path: str, required: set[str]) -> list[dict]:
    """Read the CSV and validate its schema; exits nonzero on violations."""
    file = Path(path)
    if not file.exists():
        print(f"error: no such file: {path}", file=sys.stderr)
        sys.exit(2)
    with open(file, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            missing = required - set(reader.fieldnames or [])
            print(f"error: {path} is missing columns {sorted(missing)}", file=sys.stderr)
            sys.exit(2)
        rows = list(reader)
    if not rows:
        print(f"error: {path} has no data rows", file=sys.stderr)
        sys.exit(2)
    return rows


def save_figure(fig, path: str) -> None:
    fig.savefig(path, dpi=120, bbox_inches="tight")
    print(f"wrote {path}")
