#!/usr/bin/env python3
"""Validation-WER curves on the default synthetic task, used to pick training budgets.

    python3 scripts/calibrate.py --modes baseline aux+kl ce --steps 2500 --peak-lr 3e-3
"""

from __future__ import annotations

import argparse
import json
import time

from rnnt_aux.data import SyntheticTaskSpec, generate_dataset, split_dataset
from rnnt_aux.losses import LossWeights
from rnnt_aux.model import ModelConfig
from rnnt_aux.train import TrainConfig, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--modes", nargs="+", default=["baseline"])
    ap.add_argument("--steps", type=int, default=2500)
    ap.add_argument("--peak-lr", type=float, default=3e-3)
    ap.add_argument("--seed", type=int, default=0, help="data and training seed")
    ap.add_argument("--points", type=int, default=5, help="validation points along the run")
    ap.add_argument("--json", help="write the curves here")
    args = ap.parse_args()

    ds = generate_dataset(SyntheticTaskSpec(seed=args.seed), 600)
    splits = split_dataset(ds, {"train": 500, "valid": 100})
    config = ModelConfig(vocab_size=ds.vocab_size, state_vocab_size=ds.state_vocab_size)
    curves = {}
    for mode in args.modes:
        cfg = TrainConfig(mode=mode, weights=LossWeights(), max_steps=args.steps, peak_lr=args.peak_lr,
                          seed=args.seed, eval_every=max(args.steps // args.points, 1))
        t = time.perf_counter()
        print(f"== {mode}")
        ckpt = train(splits["train"], config, cfg, valid=splits["valid"], quiet=False)
        curves[mode] = {"seconds": time.perf_counter() - t,
                        "points": [{k: h[k] for k in ("step", "valid_loss", "valid_wer")}
                                   for h in ckpt.history if "valid_wer" in h]}
        print(f"{mode}: {curves[mode]['seconds']:.0f}s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(curves, fh, indent=2)


if __name__ == "__main__":
    main()
