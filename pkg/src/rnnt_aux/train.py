"""Optimisation loop, learning-rate schedule and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .data import Dataset, collate, spec_augment_mask
from .decode import greedy_decode
from .losses import MODES, LossReport, LossWeights, total_objective
from .metrics import wer
from .model import ModelConfig, ParamSet, encode, init_params

MAGIC = b"RNTAUX01"


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, report: LossReport | None, reason: str):
        super().__init__(f"training aborted at step {step}: {reason}; last report: "
                         f"{report.as_dict() if report else None}")
        self.step = step
        self.report = report


@dataclass
class TrainConfig:
    mode: str = "baseline"
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 8
    max_steps: int = 5000
    peak_lr: float = 1e-3
    warmup_steps: int | None = None
    hold_steps: int | None = None
    decay_steps: int | None = None
    floor_lr_ratio: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float = 5.0
    seed: int = 0
    eval_every: int = 500
    checkpoint: str | None = None
    kl_detach_primary: bool = False
    freq_masks: int = 0
    max_freq_width: int = 0
    time_masks: int = 0
    max_time_width: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.max_steps < 1 or self.batch_size < 1:
            raise ValueError("max_steps and batch_size must be positive")
        if self.warmup_steps is None and self.hold_steps is None and self.decay_steps is None:
            self.warmup_steps = int(round(0.1 * self.max_steps))
            self.hold_steps = int(round(0.4 * self.max_steps))
            self.decay_steps = self.max_steps - self.warmup_steps - self.hold_steps
        if None in (self.warmup_steps, self.hold_steps, self.decay_steps):
            raise ValueError("give all three stage lengths or none")
        if self.warmup_steps + self.hold_steps + self.decay_steps != self.max_steps:
            raise ValueError("warmup + hold + decay steps must equal max_steps")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not (0 < self.floor_lr_ratio <= 1):
            raise ValueError("floor_lr_ratio must lie in (0, 1]")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d


def tri_stage_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from the floor, constant hold, exponential decay back to the floor."""
    if not 0 <= step < cfg.max_steps:
        raise ValueError(f"step {step} outside [0, {cfg.max_steps})")
    peak, floor = cfg.peak_lr, cfg.floor_lr_ratio * cfg.peak_lr
    if step < cfg.warmup_steps:
        return floor + (peak - floor) * step / cfg.warmup_steps
    step -= cfg.warmup_steps
    if step < cfg.hold_steps:
        return peak
    step -= cfg.hold_steps
    if cfg.decay_steps <= 1:
        return floor
    return peak * math.exp(math.log(cfg.floor_lr_ratio) * step / (cfg.decay_steps - 1))


# -- Adam ---------------------------------------------------------------------------------------------

@dataclass
class AdamState:
    m: ParamSet
    v: ParamSet
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "AdamState":
        zero = ParamSet({p: {k: np.zeros_like(v) for k, v in g.items()} for p, g in params.arrays.items()})
        return cls(zero, zero.copy(), 0)


def adam_update(theta, g, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update for a single array; ``t`` counts from 1.

    Returns fresh arrays; the arguments are left untouched.
    """
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * (g * g)
    step = (lr / (1.0 - beta1 ** t)) * m / (np.sqrt(v / (1.0 - beta2 ** t)) + eps)
    return theta - step, m, v


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Update ``params`` and ``state`` in place."""
    t = state.t + 1
    for part, name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {part}/{name}")
    for part, name, g in grads.items():
        theta, m, v = adam_update(params[part][name], g, state.m[part][name], state.v[part][name],
                                  t, lr, beta1, beta2, eps)
        params[part][name], state.m[part][name], state.v[part][name] = theta, m, v
    state.t = t


def global_norm(grads: ParamSet) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for _, _, g in grads.items()))


def clip_by_global_norm(grads: ParamSet, max_norm: float) -> float:
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for part, name, g in list(grads.items()):
            grads[part][name] = g * scale
    return norm


def grads_of(leaves) -> ParamSet:
    return ParamSet({p: {k: n.grad for k, n in g.items()} for p, g in leaves.items()})


# -- checkpoints --------------------------------------------------------------------------------------

@dataclass
class Checkpoint:
    step: int
    params: ParamSet
    adam: AdamState
    train_config: dict
    model_config: dict
    history: list = field(default_factory=list)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Little-endian: magic, u64 JSON length, JSON metadata, u32 count, named float64 arrays."""
    meta = json.dumps({"step": ckpt.step, "adam_t": ckpt.adam.t, "train_config": ckpt.train_config,
                       "model_config": ckpt.model_config, "history": ckpt.history}).encode()
    arrays = []
    for prefix, ps in (("param", ckpt.params), ("adam_m", ckpt.adam.m), ("adam_v", ckpt.adam.v)):
        for part, name, arr in ps.items():
            arrays.append((f"{prefix}/{part}/{name}", arr))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = 8
    (n,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    meta = json.loads(buf[pos:pos + n])
    pos += n
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * size
        prefix, part, key = name.split("/", 2)
        groups[prefix].setdefault(part, {})[key] = arr
    return Checkpoint(meta["step"], ParamSet(groups["param"]),
                      AdamState(ParamSet(groups["adam_m"]), ParamSet(groups["adam_v"]), meta["adam_t"]),
                      meta["train_config"], meta["model_config"], meta["history"])


# -- training ----------------------------------------------------------------------------------------

def _sample_batch(dataset: Dataset, cfg: TrainConfig, step: int):
    # Per-step generator so a resumed run draws the same batches.
    rng = np.random.default_rng([cfg.seed, step])
    n = len(dataset)
    idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
    utts = [dataset.utterances[i] for i in idx]
    feats = None
    if cfg.freq_masks or cfg.time_masks:
        feats = [spec_augment_mask(u.features, cfg.freq_masks, min(cfg.max_freq_width, u.features.shape[1]),
                                   cfg.time_masks, min(cfg.max_time_width, u.features.shape[0]), rng)
                 for u in utts]
    return collate(utts, feats)


def evaluate_dataset(dataset: Dataset, params: ParamSet, model_config: ModelConfig,
                     batch_size: int = 32) -> dict:
    """Mean primary transducer loss and pooled greedy token WER."""
    losses = []
    consts = params.constants()
    for start in range(0, len(dataset), batch_size):
        utts = dataset.utterances[start:start + batch_size]
        report, _ = total_objective(collate(utts), consts, model_config, LossWeights(0.0, 0.0), "baseline")
        losses.append(report.primary_rnnt * len(utts))
    refs = {u.id: list(u.labels) for u in dataset.utterances}
    hyps = {u.id: greedy_decode(u.features, params, model_config) for u in dataset.utterances}
    return {"loss": sum(losses) / len(dataset), "wer": wer(refs, hyps).wer}


def _optimize(params: ParamSet, objective: Callable, cfg: TrainConfig, dataset: Dataset,
              start: Checkpoint | None, stop_step: int | None, on_step: Callable | None,
              model_config_dict: dict) -> Checkpoint:
    adam = start.adam if start else AdamState.zeros_like(params)
    history = list(start.history) if start else []
    first = start.step if start else 0
    last = cfg.max_steps if stop_step is None else min(stop_step, cfg.max_steps)
    report = None
    for step in range(first, last):
        lr = tri_stage_lr(step, cfg)
        batch = _sample_batch(dataset, cfg, step)
        try:
            leaves = params.leaves()
            report, root = objective(batch, leaves)
        except dc.NonFiniteError as e:
            raise TrainingAborted(step, report, str(e)) from e
        if not math.isfinite(report.total):
            raise TrainingAborted(step, report, "non-finite loss")
        dc.backward(root)
        grads = grads_of(leaves)
        norm = clip_by_global_norm(grads, cfg.grad_clip_norm)
        try:
            adam_step(params, grads, adam, lr, cfg.beta1, cfg.beta2, cfg.eps)
        except FloatingPointError as e:
            raise TrainingAborted(step, report, str(e)) from e
        record = {"step": step, "lr": lr, "grad_norm": norm, **report.as_dict()}
        if on_step is not None:
            extra = on_step(step, params)
            if extra:
                record.update(extra)
        history.append(record)
    return Checkpoint(last, params, adam, cfg.as_dict(), model_config_dict, history)


def train(dataset: Dataset, model_config: ModelConfig, cfg: TrainConfig, valid: Dataset | None = None,
          params: ParamSet | None = None, resume: Checkpoint | None = None, stop_step: int | None = None,
          log_path=None, quiet: bool = True) -> Checkpoint:
    """Train for ``cfg.max_steps`` (or until ``stop_step``), returning the final checkpoint.

    ``resume`` continues a saved run exactly; ``params`` overrides the
    seeded initialisation (e.g. with a pretrained encoder).
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if "ce" in MODES[cfg.mode] and any(u.frame_states is None for u in dataset.utterances):
        raise ValueError("CE modes need frame states")
    if resume is not None:
        params = resume.params.copy()
        resume = Checkpoint(resume.step, params, AdamState(resume.adam.m.copy(), resume.adam.v.copy(), resume.adam.t),
                            resume.train_config, resume.model_config, list(resume.history))
    elif params is None:
        params = init_params(model_config, cfg.seed)
    else:
        params = params.copy()

    def objective(batch, leaves):
        return total_objective(batch, leaves, model_config, cfg.weights, cfg.mode,
                               kl_detach_primary=cfg.kl_detach_primary)

    def on_step(step, current):
        extra = None
        done = step + 1
        if valid is not None and cfg.eval_every and (done % cfg.eval_every == 0 or done == cfg.max_steps):
            ev = evaluate_dataset(valid, current, model_config)
            extra = {"valid_loss": ev["loss"], "valid_wer": ev["wer"]}
            if not quiet:
                print(f"step {done}: valid loss {ev['loss']:.4f} wer {100 * ev['wer']:.2f}%", flush=True)
        return extra

    ckpt = _optimize(params, objective, cfg, dataset, resume, stop_step, on_step, asdict(model_config))
    if log_path:
        write_metric_log(ckpt.history, log_path)
    if cfg.checkpoint:
        save_checkpoint(ckpt, cfg.checkpoint)
    return ckpt


def write_metric_log(history, path) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")


# -- CE pretraining ------------------------------------------------------------------------------------

def _pretrain_params(model_config: ModelConfig, seed: int) -> ParamSet:
    full = init_params(model_config, seed)
    rng = np.random.default_rng([seed, 1])
    H, S = model_config.encoder_hidden, model_config.state_vocab_size
    bound = 1.0 / math.sqrt(H)
    head = {"pretrain.w": rng.uniform(-bound, bound, (H, S)), "pretrain.b": rng.uniform(-bound, bound, (S,))}
    return ParamSet({"enc_shared": full["enc_shared"], "enc_upper": full["enc_upper"], "ce_heads": head})


def _top_state_logprobs(batch, leaves, model_config):
    enc = encode(batch.features, leaves, model_config, batch.frame_lengths)
    head = leaves["ce_heads"]
    logits = dc.add(dc.matmul(enc.top, head["pretrain.w"]), head["pretrain.b"])
    stride = model_config.layer_stride(model_config.encoder_layers)
    targets = batch.states[:, ::stride][:, :logits.shape[1]]
    return dc.log_softmax(logits), targets, enc.top_lengths


def ce_pretrain(dataset: Dataset, model_config: ModelConfig, cfg: TrainConfig) -> tuple[dict, dict]:
    """Train the encoder with a throw-away linear state head on the top layer.

    Returns the encoder partitions and a small summary with the final frame accuracy.
    """
    from .losses import ce_node

    params = _pretrain_params(model_config, cfg.seed)

    def objective(batch, leaves):
        lp, targets, lengths = _top_state_logprobs(batch, leaves, model_config)
        root = ce_node(lp, targets, lengths)
        v = float(root.value)
        return LossReport(primary_rnnt=0.0, ce={model_config.encoder_layers: v}, total=v), root

    ckpt = _optimize(params, objective, cfg, dataset, None, None, None, asdict(model_config))
    acc = frame_accuracy(dataset, params, model_config)
    encoder = {"enc_shared": ckpt.params["enc_shared"], "enc_upper": ckpt.params["enc_upper"]}
    return encoder, {"frame_accuracy": acc, "final_ce": ckpt.history[-1]["total"]}


def frame_accuracy(dataset: Dataset, params: ParamSet, model_config: ModelConfig) -> float:
    correct = total = 0
    consts = params.constants()
    for u in dataset.utterances:
        lp, targets, lengths = _top_state_logprobs(collate([u]), consts, model_config)
        pred = lp.value[0, :lengths[0]].argmax(axis=-1)
        correct += int((pred == targets[0, :lengths[0]]).sum())
        total += int(lengths[0])
    return correct / total


def with_encoder(params: ParamSet, encoder: dict) -> ParamSet:
    out = params.copy()
    for part in ("enc_shared", "enc_upper"):
        for k, v in encoder[part].items():
            if out[part][k].shape != v.shape:
                raise ValueError(f"pretrained {part}/{k} has shape {v.shape}, expected {out[part][k].shape}")
            out[part][k] = v.copy()
    return out
