#!/usr/bin/env python3
"""Full pipeline on the synthetic task through the command line.

Generates data, trains a baseline and one auxiliary-loss model, decodes
the test split with each and reports WER and WERR.

    python3 scripts/run_synthetic.py --out runs/demo --mode aux+kl --max-steps 2500 --peak-lr 3e-3
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from rnnt_aux.cli import main as cli


def step(argv: list[str]) -> None:
    print("$ rnnt-aux " + " ".join(argv), flush=True)
    code = cli(argv)
    if code:
        sys.exit(code)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/synthetic")
    ap.add_argument("--mode", default="aux+kl")
    ap.add_argument("--max-steps", type=int, default=2500)
    ap.add_argument("--peak-lr", type=float, default=3e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", help="run config JSON shared by every step")
    ap.add_argument("--beam", type=int, default=1)
    args = ap.parse_args()

    out = Path(args.out)
    common = ["--seed", str(args.seed)] + (["--config", args.config] if args.config else [])
    data = out / "data"
    step(["generate-data", *common, "--out", str(data)])
    for mode in ("baseline", args.mode):
        run = out / mode
        step(["train", *common, "--data", str(data), "--mode", mode, "--max-steps", str(args.max_steps),
              "--peak-lr", str(args.peak_lr), "--out", str(run)])
        step(["decode", *common, "--checkpoint", str(run / "checkpoint.bin"), "--input", str(data / "test.jsonl"),
              "--beam", str(args.beam), "--out", str(run)])
    base, cand = out / "baseline", out / args.mode
    step(["evaluate", "--nbest", str(base / "nbest.jsonl"), "--refs", str(data / "test.jsonl"),
          "--out", str(base)])
    step(["evaluate", "--nbest", str(cand / "nbest.jsonl"), "--refs", str(data / "test.jsonl"),
          "--baseline", str(base / "metrics.json"), "--out", str(cand)])


if __name__ == "__main__":
    main()
