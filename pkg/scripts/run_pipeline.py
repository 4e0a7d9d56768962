#!/usr/bin/env python3
"""End-to-end demo: generate data, run all four training stages, evaluate, analyze.

Everything goes through the `agevlm` CLI so this doubles as a smoke test of the
command-line surface. With the defaults it finishes in a few minutes on CPU.
"""
import argparse
import sys
from pathlib import Path

from agevlm.cli import main as cli


def run(argv):
    print("+ agevlm " + " ".join(argv), flush=True)
    code = cli(argv)
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/pipeline", help="output directory")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train-count", type=int, default=200)
    ap.add_argument("--eval-count", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=2, help="epochs per stage")
    ap.add_argument("--variant", default="age-vlm-lm",
                    choices=("age-vlm", "age-vlm-lm"), help="stage-4 variant")
    ap.add_argument("--config", help="optional YAML with model/optimizer overrides")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds = str(out / "train.jsonl")
    eval_ds = str(out / "eval.jsonl")
    cfg = ["--config", args.config] if args.config else []

    run(["gen-data", "--seed", str(args.seed), "--count", str(args.train_count),
         "--out", train_ds, "--guided-fraction", "1.0", *cfg])
    run(["gen-data", "--seed", str(args.seed + 1), "--count", str(args.eval_count),
         "--out", eval_ds, "--guided-fraction", "1.0", "--split", "eval", *cfg])

    prev = None
    for stage in (1, 2, 3, 4):
        argv = ["train", "--stage", str(stage), "--dataset", train_ds,
                "--out", str(out), "--seed", str(args.seed),
                "--epochs", str(args.epochs), *cfg]
        if stage == 4:
            argv += ["--variant", args.variant]
        if prev:
            argv += ["--resume", prev]
        run(argv)
        tag = f"stage{stage}" + (f"-{args.variant}" if stage == 4 else "")
        prev = str(out / tag)

    run(["eval", "--checkpoint", prev, "--dataset", eval_ds, *cfg])
    for mode in ("similarity", "heatmap", "padmass"):
        run(["analyze", "--mode", mode, "--checkpoint", prev,
             "--dataset", eval_ds, "--out", str(out / "analysis"), *cfg])
    print(f"done; artifacts in {out}")


if __name__ == "__main__":
    main()
