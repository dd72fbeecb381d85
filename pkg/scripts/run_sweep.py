#!/usr/bin/env python3
"""Hyperparameter sweeps over the built-in grids (omega, N, tau, lambda).

Reuses (or creates) the synthetic dataset and Phase-I checkpoint, then
runs ``bke sweep`` once per hyperparameter. Each sweep writes a
``sweep.csv`` with the last-window mean harmonic-mean and accuracy per
grid value.
"""

import argparse
import sys
from pathlib import Path

from bke.cli import DEFAULT_GRIDS, main as bke


def run(*argv) -> None:
    argv = [str(a) for a in argv]
    code = bke(argv)
    if code != 0:
        sys.exit(f"command failed ({code}): bke {' '.join(argv)}")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("runs/sweeps"),
                        help="directory for all artifacts")
    parser.add_argument("--params", nargs="+", default=list(DEFAULT_GRIDS),
                        choices=list(DEFAULT_GRIDS), help="which grids to run")
    parser.add_argument("--epochs", type=int, default=10,
                        help="fine-tuning epochs per grid point")
    args = parser.parse_args()

    prefix = args.out / "blobs"
    checkpoint = args.out / "pretrain" / "checkpoint.bkec"
    if not checkpoint.exists():
        run("synth", "--out", prefix, "--n-per-class", 300, "--side", 16,
            "--test-per-class", 100, "--seed", 1)
        run("pretrain", "--data", prefix, "--out", checkpoint.parent,
            "--epochs", 5, "--batch-size", 32, "--seed", 23)

    for param in args.params:
        out_dir = args.out / param
        print(f"\n=== sweeping {param} over {DEFAULT_GRIDS[param]} ===")
        run("sweep", "--data", prefix, "--checkpoint", checkpoint, "--out", out_dir,
            "--param", param, "--epochs", args.epochs,
            "--batch-size", "16", "--learning-rate", "0.5", "--momentum", "0.5",
            "--lambda", "1.0", "--tau", "1.0", "--seed", 0)
        print(f"results: {out_dir / 'sweep.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
