#!/usr/bin/env python3
"""Full two-phase experiment on the synthetic blob dataset.

Generates the desk-scale dataset (300/class, 16x16, 100/class held out),
pretrains the dual networks, fine-tunes with batch knowledge ensembling
on all labels, then compares ensembling (lambda=1) against plain CE
(lambda=0) over five seeds with only 10% of the training labels. Every
step goes through the ``bke`` CLI, so the artifacts under --out match
what the command line produces, byte for byte, run after run.
"""

import argparse
import sys
from pathlib import Path

from bke.cli import main as bke
from bke.metrics import read_epoch_csv

PRETRAIN_SEED = 23
FINETUNE_SEEDS = range(5)
RECIPE = [
    "--omega", "0.5", "--batch-size", "16", "--tau", "1.0",
    "--epochs", "10", "--learning-rate", "0.5", "--momentum", "0.5",
]


def run(*argv) -> None:
    argv = [str(a) for a in argv]
    code = bke(argv)
    if code != 0:
        sys.exit(f"command failed ({code}): bke {' '.join(argv)}")


def final_acc(out_dir: Path) -> float:
    return read_epoch_csv(out_dir / "metrics.csv")[-1].acc


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("runs/synth"),
                        help="directory for all artifacts")
    args = parser.parse_args()

    prefix = args.out / "blobs"
    run("synth", "--out", prefix, "--n-per-class", 300, "--side", 16,
        "--test-per-class", 100, "--seed", 1)

    pre_dir = args.out / "pretrain"
    run("pretrain", "--data", prefix, "--out", pre_dir,
        "--epochs", 5, "--batch-size", 32, "--seed", PRETRAIN_SEED)
    checkpoint = pre_dir / "checkpoint.bkec"

    full_dir = args.out / "finetune_full"
    run("finetune", "--data", prefix, "--checkpoint", checkpoint, "--out", full_dir,
        *RECIPE, "--lambda", "1.0", "--seed", 0)
    print(f"\nfull-label final accuracy: {final_acc(full_dir):.4f}")

    print("\n10%-label comparison (paired subsample per seed):")
    means = {}
    for lam in ("1.0", "0.0"):
        accs = []
        for seed in FINETUNE_SEEDS:
            out_dir = args.out / f"finetune_f10_lam{lam}_seed{seed}"
            run("finetune", "--data", prefix, "--checkpoint", checkpoint,
                "--out", out_dir, *RECIPE, "--lambda", lam,
                "--fraction", "0.1", "--seed", seed)
            accs.append(final_acc(out_dir))
        means[lam] = sum(accs) / len(accs)
        label = "ensembling" if lam == "1.0" else "plain CE  "
        print(f"  lambda={lam} ({label}): accs {[f'{a:.3f}' for a in accs]} "
              f"mean {means[lam]:.4f}")
    print(f"\nensembling gain: {means['1.0'] - means['0.0']:+.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
