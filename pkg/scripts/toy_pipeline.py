#!/usr/bin/env python3
"""End-to-end desk pipeline: scenarios -> oracle -> training -> co-optimization.

Runs the whole chain through the CLI at toy scale into ./runs/toy_pipeline,
then prints the resulting Pareto front.  Rerunning with the same seed
reproduces every CSV byte for byte.
"""
import json
import sys
from pathlib import Path

from p2m.cli import main

SEED = 2025
ROOT = Path("runs/toy_pipeline")


def run(args):
    code = main(args)
    if code != 0:
        sys.exit(code)


if __name__ == "__main__":
    region = ["--region", "skive", "--seed", str(SEED)]
    run(["gen-scenarios", "--n", "16", "--horizon", "96",
         "--out", str(ROOT / "scenarios"), *region])
    run(["build-oracle", "--n", "12", "--horizon", "96",
         "--scenarios", str(ROOT / "scenarios"),
         "--out", str(ROOT / "oracle"), *region])
    run(["train", "--oracle", str(ROOT / "oracle"), "--epochs", "8",
         "--warmup-steps", "200", "--out", str(ROOT / "model"), *region])
    run(["co-optimize", "--mode", "agent",
         "--model", str(ROOT / "model" / "model.npz"),
         "--iterations", "2", "--batch", "4", "--m", "4", "--horizon", "96",
         "--scenarios", str(ROOT / "scenarios"),
         "--out", str(ROOT / "cooptimize"), *region])
    front = json.loads((ROOT / "cooptimize" / "pareto.json").read_text())
    print(f"\nPareto front ({len(front['points'])} points):")
    for p in front["points"]:
        print(f"  lcom={p['expected_lcom']:8.3f} $/kg   "
              f"emissions={p['expected_emissions']:9.2f} ton/month   "
              f"p_positive={p['p_positive']:.2f}")
