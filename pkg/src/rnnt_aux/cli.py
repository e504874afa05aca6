"""``rnnt-aux`` command line.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig
from .data import Dataset, DatasetFormatError, generate_dataset, read_dataset, split_dataset, write_dataset
from .decode import decode_dataset, read_nbest, train_ngram_lm, write_nbest
from .lattice import GridError
from .losses import MODES, LossWeights
from .metrics import metrics_report, wer
from .model import ModelConfig, ParamSet
from .train import (AdamState, Checkpoint, TrainConfig, TrainingAborted, ce_pretrain, evaluate_dataset,
                    load_checkpoint, save_checkpoint, train, with_encoder)
from .verify import GRADCHECK_FLOOR, gradcheck_mode, oracle_check

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
SPLITS = ("train", "valid", "test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- shared helpers ------------------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None))
    over = {}
    if getattr(args, "seed", None) is not None:
        # One seed drives data generation and training.
        seed = args.seed
        over["train.seed"] = seed
        raw = cfg.to_dict()["data"]
        raw["synthetic"]["seed"] = seed
        over["data"] = raw
    for flag, key in (("mode", "mode"), ("max_steps", "train.max_steps"), ("peak_lr", "train.peak_lr"),
                      ("beam", "decode.beam_width"), ("lm_weight", "decode.lm_weight"),
                      ("lm_order", "decode.lm_order")):
        if getattr(args, flag, None) is not None:
            over[key] = getattr(args, flag)
    if getattr(args, "lambda_aux", None) is not None or getattr(args, "lambda_ce", None) is not None:
        w = asdict(cfg.weights)
        if isinstance(args.lambda_aux, float):
            w["lambda_aux"] = args.lambda_aux
        if isinstance(args.lambda_ce, float):
            w["lambda_ce"] = args.lambda_ce
        over["weights"] = w
    if over.get("train.max_steps") is not None:
        # Stage lengths were resolved for the old budget; let them re-derive.
        raw_train = cfg.to_dict()["train"]
        raw_train.update(max_steps=over.pop("train.max_steps"), warmup_steps=None, hold_steps=None,
                         decay_steps=None)
        over["train"] = raw_train
    return cfg.with_overrides(**over) if over else cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: RunConfig, out: Path | None) -> None:
    text = json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
    if out is None:
        print(text)
        return
    (out / "effective_config.json").write_text(text + "\n")
    print(f"effective config: {out / 'effective_config.json'}")


def load_splits(cfg: RunConfig, data_dir: str | None) -> dict[str, Dataset]:
    """Datasets from ``--data DIR``, then configured paths, else generated from the synthetic spec."""
    if data_dir is not None:
        d = Path(data_dir)
        return {s: read_dataset(d / f"{s}.jsonl") for s in SPLITS if (d / f"{s}.jsonl").exists()}
    paths = {s: getattr(cfg.data, f"{s}_path") for s in SPLITS}
    if any(paths.values()):
        return {s: read_dataset(p) for s, p in paths.items() if p}
    sizes = {s: getattr(cfg.data, f"{s}_size") for s in SPLITS}
    ds = generate_dataset(cfg.data.synthetic, sum(sizes.values()))
    return split_dataset(ds, sizes)


def _check_vocab(cfg: RunConfig, ds: Dataset) -> None:
    if ds.vocab_size != cfg.model.vocab_size or ds.state_vocab_size != cfg.model.state_vocab_size:
        raise ConfigError(f"dataset has vocab {ds.vocab_size}/{ds.state_vocab_size} states, model expects "
                          f"{cfg.model.vocab_size}/{cfg.model.state_vocab_size}")


def _load_model(path) -> tuple[ParamSet, ModelConfig]:
    ckpt = load_checkpoint(path)
    mc = dict(ckpt.model_config)
    for k in ("subsample_after", "aux_taps", "ce_taps"):
        mc[k] = tuple(mc[k])
    return ckpt.params, ModelConfig(**mc)


# -- commands ------------------------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    _echo_config(cfg, out)
    for name, ds in load_splits(cfg, None).items():
        write_dataset(ds, out / f"{name}.jsonl")
        print(f"{name}: {len(ds)} utterances -> {out / f'{name}.jsonl'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    _echo_config(cfg, out)
    splits = load_splits(cfg, args.data)
    _check_vocab(cfg, splits["train"])
    params = None
    if args.init_encoder:
        from .model import init_params
        enc = load_checkpoint(args.init_encoder).params
        params = with_encoder(init_params(cfg.model, cfg.train.seed), enc.arrays)
    tc = TrainConfig(**{**asdict(cfg.train), "weights": cfg.weights, "checkpoint": str(out / "checkpoint.bin")})
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt = train(splits["train"], cfg.model, tc, valid=splits.get("valid"), params=params, resume=resume,
                 log_path=out / "metrics.jsonl", quiet=False)
    last = ckpt.history[-1] if ckpt.history else {}
    print(f"trained {ckpt.step} steps; final total {last.get('total', float('nan')):.4f}; "
          f"checkpoint {out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_ce_pretrain(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    _echo_config(cfg, out)
    splits = load_splits(cfg, args.data)
    _check_vocab(cfg, splits["train"])
    encoder, summary = ce_pretrain(splits["train"], cfg.model, cfg.train)
    ps = ParamSet(encoder)
    save_checkpoint(Checkpoint(cfg.train.max_steps, ps, AdamState.zeros_like(ps), cfg.train.as_dict(),
                               asdict(cfg.model), [summary]), out / "encoder.bin")
    (out / "pretrain_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"frame accuracy {summary['frame_accuracy']:.4f}; encoder {out / 'encoder.bin'}")
    return EXIT_OK


def cmd_decode(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    _echo_config(cfg, out)
    params, mc = _load_model(args.checkpoint)
    ds = read_dataset(args.input)
    lm = None
    if cfg.decode.lm_order:
        if not args.lm_data:
            raise ConfigError("an LM order is set but --lm-data was not given")
        lm = train_ngram_lm([u.labels for u in read_dataset(args.lm_data).utterances],
                            cfg.decode.lm_order, mc.vocab_size)
    records = decode_dataset(ds.utterances, params, mc, cfg.decode.beam_width, lm, cfg.decode.lm_weight,
                             cfg.decode.max_symbols_per_frame, jobs=args.jobs)
    path = out / "nbest.jsonl"
    write_nbest(records, path)
    print(f"decoded {len(records)} utterances -> {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    sets = list(args.set or [])
    if args.nbest or args.refs:
        if not (args.nbest and args.refs):
            raise UsageError("--nbest and --refs go together")
        sets.append((args.name, args.nbest, args.refs))
    if not sets:
        raise UsageError("give --nbest/--refs or at least one --set NAME NBEST REFS")
    out = _out_dir(args)
    breakdowns = {}
    for name, nbest_path, refs_path in sets:
        refs = {u.id: list(u.labels) for u in read_dataset(refs_path).utterances}
        hyps = {r["id"]: r["hyps"][0]["labels"] if r["hyps"] else [] for r in read_nbest(nbest_path)}
        breakdowns[name] = wer(refs, hyps)
    baseline = None
    if args.baseline:
        base = json.loads(Path(args.baseline).read_text())
        baseline = {k: v["wer"] for k, v in base.items() if isinstance(v, dict) and "wer" in v}
    report = metrics_report(breakdowns, baseline)
    (out / "metrics.json").write_text(json.dumps(report, indent=2) + "\n")
    for name, b in breakdowns.items():
        print(f"{name}: WER {100 * b.wer:.2f}% (S={b.substitutions} D={b.deletions} "
              f"I={b.insertions} N={b.ref_tokens})")
    if "werr" in report:
        print(f"WERR {report['werr']:.1f}%")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _run_config(args)
    _echo_config(cfg, Path(args.out) if args.out else None)
    modes = sorted(MODES) if args.check_mode == "all" else [args.check_mode]
    seed = cfg.train.seed
    ok = True
    for mode in modes:
        rep = gradcheck_mode(mode, weights=cfg.weights, seed=seed, tol=args.tol, step=args.step,
                             floor=args.floor)
        worst = max(rep["max_rel_error"].values(), default=0.0)
        ok &= rep["passed"]
        parts = " ".join(f"{p}={e:.2e}" for p, e in rep["max_rel_error"].items())
        print(f"{mode:10s} max rel error {worst:.3e} (abs {rep['max_abs_error']:.1e}) [{parts}] "
              f"gate gap {rep['gate_vs_frozen_max_abs']:.1e}"
              f" {'ok' if rep['passed'] else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_oracle_check(args) -> int:
    rep = oracle_check(args.instances, args.seed if args.seed is not None else 0)
    print(f"instances {rep['instances']} max |dloss| {rep['max_abs_diff']:.3e} "
          f"{'ok' if rep['passed'] else 'FAIL'}")
    return EXIT_OK if rep["passed"] else EXIT_VERIFY


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _sweep_point(job):
    name, cfg_dict, train_ds, valid_ds = job
    cfg = RunConfig.from_dict(cfg_dict)
    ckpt = train(train_ds, cfg.model, cfg.train)
    ev = evaluate_dataset(valid_ds, ckpt.params, cfg.model)
    return name, ev


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    _echo_config(cfg, out)
    splits = load_splits(cfg, args.data)
    _check_vocab(cfg, splits["train"])
    mode = args.mode or ("aux+kl" if cfg.mode == "baseline" else cfg.mode)
    aux_grid = args.lambda_aux or [cfg.weights.lambda_aux]
    ce_grid = args.lambda_ce or [cfg.weights.lambda_ce]
    base = cfg.to_dict()
    jobs = [("baseline", {**base, "mode": "baseline"}, splits["train"], splits["valid"])]
    points = {}
    for la in aux_grid:
        for lc in ce_grid:
            name = f"{mode} aux={la:g} ce={lc:g}"
            points[name] = (la, lc)
            jobs.append((name, {**base, "mode": mode, "weights": asdict(LossWeights(la, lc))},
                         splits["train"], splits["valid"]))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = dict(pool.map(_sweep_point, jobs))
    else:
        results = dict(_sweep_point(j) for j in jobs)
    b = results["baseline"]
    rows = [{"name": "baseline", "lambda_aux": None, "lambda_ce": None, **b, "werr": 0.0}]
    for name, (la, lc) in points.items():
        r = results[name]
        werr = 100.0 * (b["wer"] - r["wer"]) / b["wer"] if b["wer"] > 0 else float("nan")
        rows.append({"name": name, "lambda_aux": la, "lambda_ce": lc, **r, "werr": werr})
    (out / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(f"{'run':28s} {'valid loss':>10s} {'valid WER':>10s} {'WERR':>7s}")
    for r in rows:
        print(f"{r['name']:28s} {r['loss']:10.4f} {100 * r['wer']:9.2f}% {r['werr']:6.1f}%")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rnnt-aux", description="Transducer training with auxiliary intermediate-layer losses.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(sp, out_default="out"):
        sp.add_argument("--config", help="run config JSON")
        sp.add_argument("--seed", type=int, help="seed for data generation and training")
        sp.add_argument("--out", default=out_default, help="artifact directory")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")

    sp = sub.add_parser("generate-data", help="write train/valid/test dataset files")
    common(sp)
    sp.set_defaults(fn=cmd_generate_data)

    for name, fn, hlp in (("train", cmd_train, "train a model to a checkpoint"),
                          ("ce-pretrain", cmd_ce_pretrain, "pretrain the encoder on frame states")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--data", help="directory holding train.jsonl / valid.jsonl")
        sp.add_argument("--max-steps", type=int)
        sp.add_argument("--peak-lr", type=float)
        if name == "train":
            sp.add_argument("--mode", choices=sorted(MODES))
            sp.add_argument("--lambda-aux", type=float)
            sp.add_argument("--lambda-ce", type=float)
            sp.add_argument("--init-encoder", help="encoder checkpoint from ce-pretrain")
            sp.add_argument("--resume", help="checkpoint to continue from")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("decode", help="write N-best hypotheses for a dataset")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True, help="dataset file to decode")
    sp.add_argument("--beam", type=int)
    sp.add_argument("--lm-weight", type=float)
    sp.add_argument("--lm-order", type=int, choices=(0, 1, 2))
    sp.add_argument("--lm-data", help="dataset whose transcripts train the fusion LM")
    sp.set_defaults(fn=cmd_decode)

    sp = sub.add_parser("evaluate", help="score N-best files against references")
    sp.add_argument("--out", default="out")
    sp.add_argument("--nbest")
    sp.add_argument("--refs")
    sp.add_argument("--name", default="test")
    sp.add_argument("--set", nargs=3, action="append", metavar=("NAME", "NBEST", "REFS"))
    sp.add_argument("--baseline", help="baseline metrics.json; adds WERR")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every training mode")
    common(sp, out_default=None)
    sp.add_argument("--mode", dest="check_mode", choices=sorted(MODES) + ["all"], default="all")
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--step", type=float, default=1e-5)
    sp.add_argument("--floor", type=float, default=GRADCHECK_FLOOR, help="relative-error denominator floor")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("oracle-check", help="transducer loss versus alignment enumeration")
    sp.add_argument("--instances", type=int, default=200)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_oracle_check)

    sp = sub.add_parser("sweep", help="train a grid of auxiliary weights and compare to baseline")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--mode", choices=sorted(set(MODES) - {"baseline"}))
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--peak-lr", type=float)
    sp.add_argument("--lambda-aux", type=_float_list)
    sp.add_argument("--lambda-ce", type=_float_list)
    sp.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"rnnt-aux {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"rnnt-aux {args.command}: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, DatasetFormatError, GridError, OSError, ValueError, KeyError) as e:
        print(f"rnnt-aux {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
