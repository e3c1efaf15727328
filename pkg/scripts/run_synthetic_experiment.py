#!/usr/bin/env python3
"""End-to-end synthetic experiment through the CLI surface.

Generates a three-class synthetic volume, trains one small model per
class, predicts probability maps, fuses them into color masks, and
reports per-class metrics. Everything lands under --out.

Usage:
    python scripts/run_synthetic_experiment.py --out runs/demo [--epochs 60]
"""

import argparse
import sys
from pathlib import Path

from seget.cli import main as seget

CLASSES = ("blob", "tube", "ring")


def run(argv):
    rc = seget(argv)
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/synthetic")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--slices", type=int, default=8)
    ap.add_argument("--epochs", type=int, default=60)
    args = ap.parse_args()

    out = Path(args.out)
    data = out / "data"
    run(["synth", "--seed", str(args.seed), "--size", str(args.size),
         "--slices", str(args.slices), "--classes", ",".join(CLASSES),
         "--out-dir", str(data)])

    overrides = [
        "--set", "network.base_filters=4",
        "--set", f"train.epochs={args.epochs}",
        "--set", "train.learning_rate=2e-3",
        "--set", "train.early_stop_patience=15",
        "--set", "train.reduce_patience=8",
        "--set", "data.window=64",
        "--set", "data.stride=32",
    ]
    prob_stacks = []
    for name in CLASSES:
        run_dir = out / f"train_{name}"
        print(f"\n=== training {name} ===")
        run(["train",
             "--volume", str(data / "volume.mrc"),
             "--mask", str(data / f"mask_{name}.mrc"),
             "--out-dir", str(run_dir), "--seed", str(args.seed),
             *overrides])
        pred_dir = out / f"pred_{name}"
        run(["predict", "--checkpoint", str(run_dir / "best.ckpt"),
             "--volume", str(data / "volume.mrc"),
             "--out-dir", str(pred_dir),
             "--window", "64", "--stride", "32", "--save-probs"])
        print(f"--- metrics for {name} ---")
        run(["evaluate", "--pred", str(pred_dir),
             "--gt", str(data / f"mask_{name}.mrc"),
             "--json", str(pred_dir / "metrics.json")])
        prob_stacks.append(str(pred_dir / "probs.npy"))

    print("\n=== fusing classes ===")
    run(["fuse", "--probs", *prob_stacks, "--out-dir", str(out / "fused")])
    print(f"\nartifacts under {out}/")


if __name__ == "__main__":
    main()
