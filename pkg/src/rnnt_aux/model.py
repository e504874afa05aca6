"""Transducer network with tappable encoder layers and auxiliary heads.

Encoder layers are numbered 1..L like the tap sets.  Layer ``l`` outputs
``T_l`` frames, halved (ceil) when ``l`` is in ``subsample_after``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import Node

PARTITIONS = ("enc_shared", "enc_upper", "decoder", "aux_heads", "ce_heads")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_dim: int = 16
    encoder_layers: int = 4
    encoder_hidden: int = 64
    subsample_after: tuple[int, ...] = (1,)
    pred_layers: int = 1
    pred_hidden: int = 64
    joint_hidden: int = 128
    vocab_size: int = 9
    aux_taps: tuple[int, ...] = (2,)
    ce_taps: tuple[int, ...] = (2, 4)
    aux_mlp_hidden: int | None = None  # defaults to encoder_hidden
    state_vocab_size: int = 72

    def __post_init__(self):
        self.subsample_after = tuple(sorted(set(int(i) for i in self.subsample_after)))
        self.aux_taps = tuple(sorted(set(int(i) for i in self.aux_taps)))
        self.ce_taps = tuple(sorted(set(int(i) for i in self.ce_taps)))
        if self.aux_mlp_hidden is None:
            self.aux_mlp_hidden = self.encoder_hidden
        L = self.encoder_layers
        for name in ("input_dim", "encoder_layers", "encoder_hidden", "pred_layers", "pred_hidden",
                     "joint_hidden", "aux_mlp_hidden", "state_vocab_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2 (blank plus at least one label)")
        if any(l < 1 or l >= L for l in self.aux_taps):
            raise ConfigError(f"aux_taps must lie in 1..{L - 1}, got {self.aux_taps}")
        if any(l < 1 or l > L for l in self.ce_taps):
            raise ConfigError(f"ce_taps must lie in 1..{L}, got {self.ce_taps}")
        if any(l < 1 or l > L for l in self.subsample_after):
            raise ConfigError(f"subsample_after must lie in 1..{L}")

    @property
    def shared_depth(self) -> int:
        """Number of bottom encoder layers shared with an intermediate tap."""
        taps = list(self.aux_taps) + [l for l in self.ce_taps if l < self.encoder_layers]
        return max(taps, default=0)

    def layer_lengths(self, T: int) -> list[int]:
        lengths, n = [], T
        for l in range(1, self.encoder_layers + 1):
            if l in self.subsample_after:
                n = (n + 1) // 2
            lengths.append(n)
        return lengths

    def decimation(self, l: int) -> int:
        """Stride that maps layer ``l`` frames (or input frames for l=0) onto the top layer."""
        return 2 ** sum(1 for k in self.subsample_after if k > l)

    def layer_stride(self, l: int) -> int:
        """Stride from input frames to layer ``l`` frames."""
        return 2 ** sum(1 for k in self.subsample_after if k <= l)


class ParamSet:
    """Trainable arrays grouped into disjoint partitions."""

    def __init__(self, arrays: Mapping[str, Mapping[str, np.ndarray]]):
        self.arrays = {p: dict(arrays.get(p, {})) for p in PARTITIONS}

    def __getitem__(self, partition):
        return self.arrays[partition]

    def items(self):
        for p in PARTITIONS:
            for name, arr in self.arrays[p].items():
                yield p, name, arr

    def copy(self) -> "ParamSet":
        return ParamSet({p: {k: v.copy() for k, v in g.items()} for p, g in self.arrays.items()})

    def leaves(self):
        return {p: {k: dc.param(v) for k, v in g.items()} for p, g in self.arrays.items()}

    def constants(self):
        return {p: {k: dc.constant(v) for k, v in g.items()} for p, g in self.arrays.items()}

    def num_arrays(self) -> int:
        return sum(len(g) for g in self.arrays.values())

    def num_params(self, partition: str | None = None) -> int:
        parts = PARTITIONS if partition is None else (partition,)
        return int(sum(v.size for p in parts for v in self.arrays[p].values()))

    def equal(self, other: "ParamSet") -> bool:
        return all(
            self.arrays[p].keys() == other.arrays[p].keys()
            and all(np.array_equal(v, other.arrays[p][k]) for k, v in self.arrays[p].items())
            for p in PARTITIONS
        )


def encoder_partition(config: ModelConfig, l: int) -> str:
    return "enc_shared" if l <= config.shared_depth else "enc_upper"


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> ParamSet:
    rng = np.random.default_rng(seed)
    H, P, J, V = config.encoder_hidden, config.pred_hidden, config.joint_hidden, config.vocab_size
    A, S = config.aux_mlp_hidden, config.state_vocab_size
    arrays = {p: {} for p in PARTITIONS}
    for l in range(1, config.encoder_layers + 1):
        d_in = config.input_dim if l == 1 else H
        part = arrays[encoder_partition(config, l)]
        part[f"enc{l}.w_ih"] = _uniform(rng, (d_in, 4 * H), H)
        part[f"enc{l}.w_hh"] = _uniform(rng, (H, 4 * H), H)
        part[f"enc{l}.b"] = _uniform(rng, (4 * H,), H)
    dec = arrays["decoder"]
    dec["pred.embed"] = _uniform(rng, (V, P), P)
    for k in range(1, config.pred_layers + 1):
        dec[f"pred{k}.w_ih"] = _uniform(rng, (P, 4 * P), P)
        dec[f"pred{k}.w_hh"] = _uniform(rng, (P, 4 * P), P)
        dec[f"pred{k}.b"] = _uniform(rng, (4 * P,), P)
    dec["joint.w_enc"] = _uniform(rng, (H, J), H)
    dec["joint.w_pred"] = _uniform(rng, (P, J), P)
    dec["joint.b"] = _uniform(rng, (J,), H)
    dec["joint.w_out"] = _uniform(rng, (J, V), J)
    dec["joint.b_out"] = _uniform(rng, (V,), J)
    for l in config.aux_taps:
        aux = arrays["aux_heads"]
        aux[f"aux{l}.w1"] = _uniform(rng, (H, A), H)
        aux[f"aux{l}.b1"] = _uniform(rng, (A,), H)
        aux[f"aux{l}.w2"] = _uniform(rng, (A, H), A)
        aux[f"aux{l}.b2"] = _uniform(rng, (H,), A)
    for l in config.ce_taps:
        ce = arrays["ce_heads"]
        if l == config.encoder_layers:
            ce[f"ce{l}.w"] = _uniform(rng, (H, S), H)
            ce[f"ce{l}.b"] = _uniform(rng, (S,), H)
        else:
            ce[f"ce{l}.w1"] = _uniform(rng, (H, A), H)
            ce[f"ce{l}.b1"] = _uniform(rng, (A,), H)
            ce[f"ce{l}.w2"] = _uniform(rng, (A, S), A)
            ce[f"ce{l}.b2"] = _uniform(rng, (S,), A)
    return ParamSet(arrays)


def _flat(leaves):
    out = {}
    for group in leaves.values():
        out.update(group)
    return out


# -- encoder ---------------------------------------------------------------------------

@dataclass
class EncoderOutput:
    layers: list[Node]           # layer l at index l-1, each (B, T_l, H)
    lengths: list[np.ndarray] = field(default_factory=list)  # per layer, (B,) valid frames

    @property
    def top(self) -> Node:
        return self.layers[-1]

    @property
    def top_lengths(self) -> np.ndarray:
        return self.lengths[-1]


def _decimate_lengths(lengths, stride):
    return (lengths + stride - 1) // stride


def encode(x, leaves, config: ModelConfig, lengths=None) -> EncoderOutput:
    """Run the encoder stack on (B, T, d) or (T, d) features."""
    x = x if isinstance(x, Node) else dc.constant(x)
    if x.value.ndim == 2:
        x = dc.reshape(x, (1,) + x.shape)
    B, T, d = x.shape
    if T < 1:
        raise ConfigError("input has no frames; minimum T is 1")
    if d != config.input_dim:
        raise dc.ShapeError(f"encode: features have dim {d}, expected {config.input_dim}")
    lengths = np.full(B, T, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
    p = _flat(leaves)
    h = x
    out, lens = [], []
    for l in range(1, config.encoder_layers + 1):
        h = dc.lstm(h, p[f"enc{l}.w_ih"], p[f"enc{l}.w_hh"], p[f"enc{l}.b"])
        if l in config.subsample_after:
            h = dc.take(h, np.arange(0, h.shape[1], 2), axis=1)
            lengths = _decimate_lengths(lengths, 2)
        out.append(h)
        lens.append(lengths)
    return EncoderOutput(out, lens)


# -- decoder -------------------------------------------------------------------------------

def predict(y_prefix, leaves, config: ModelConfig) -> Node:
    """Prediction-network outputs for prefixes (B, u) whose first column is blank."""
    y_prefix = np.asarray(y_prefix, dtype=np.int64)
    if y_prefix.ndim == 1:
        y_prefix = y_prefix[None]
    if y_prefix.size and (y_prefix.min() < 0 or y_prefix.max() >= config.vocab_size):
        raise ValueError(f"label index out of range [0, {config.vocab_size})")
    if np.any(y_prefix[:, 0] != 0):
        raise ValueError("prefix position 0 must be blank")
    p = _flat(leaves)
    h = dc.take(p["pred.embed"], y_prefix, axis=0)
    for k in range(1, config.pred_layers + 1):
        h = dc.lstm(h, p[f"pred{k}.w_ih"], p[f"pred{k}.w_hh"], p[f"pred{k}.b"])
    return h


def join_grid(h_enc: Node, h_pred: Node, leaves, config: ModelConfig) -> Node:
    """Log-posterior grid (B, T', U+1, V) from encoder (B, T', H) and predictor (B, U+1, P)."""
    if h_enc.value.ndim != 3 or h_pred.value.ndim != 3 or h_enc.shape[0] != h_pred.shape[0]:
        raise dc.ShapeError(f"join_grid: encoder {h_enc.shape} and predictor {h_pred.shape} must be (B, ., .)")
    p = _flat(leaves)
    B, T, _ = h_enc.shape
    U1 = h_pred.shape[1]
    J = config.joint_hidden
    a = dc.reshape(dc.matmul(h_enc, p["joint.w_enc"]), (B, T, 1, J))
    b = dc.reshape(dc.matmul(h_pred, p["joint.w_pred"]), (B, 1, U1, J))
    hidden = dc.tanh(dc.add(dc.add(a, b), p["joint.b"]))
    logits = dc.add(dc.matmul(hidden, p["joint.w_out"]), p["joint.b_out"])
    return dc.log_softmax(logits)


def joint_logits_np(h_enc_t, h_pred_u, decoder: Mapping[str, np.ndarray]):
    """Joint network on plain arrays: logits for one or more (enc, pred) pairs."""
    hidden = np.tanh(h_enc_t @ decoder["joint.w_enc"] + h_pred_u @ decoder["joint.w_pred"] + decoder["joint.b"])
    return hidden @ decoder["joint.w_out"] + decoder["joint.b_out"]


# -- auxiliary branches ------------------------------------------------------------------------

def align_to_top(h: Node, l: int, config: ModelConfig) -> Node:
    """Keep every 2^k-th frame of layer ``l`` so it has the top layer's frame count."""
    stride = config.decimation(l)
    if stride == 1:
        return h
    return dc.take(h, np.arange(0, h.shape[1], stride), axis=1)


def aux_mlp(h: Node, l: int, leaves) -> Node:
    p = leaves["aux_heads"]
    hidden = dc.relu(dc.add(dc.matmul(h, p[f"aux{l}.w1"]), p[f"aux{l}.b1"]))
    return dc.add(dc.matmul(hidden, p[f"aux{l}.w2"]), p[f"aux{l}.b2"])


def gated_decoder(leaves):
    return {"decoder": {k: dc.stop_gradient(v) for k, v in leaves["decoder"].items()}}


def aux_posterior_grid(h_enc_l: Node, l: int, h_pred: Node, leaves, config: ModelConfig,
                       decoder_leaves=None) -> Node:
    """Auxiliary grid at tap ``l`` through the primary decoder.

    ``h_pred`` must already be gated (or computed from frozen decoder
    arrays); ``decoder_leaves`` defaults to gated copies of the decoder.
    """
    if l not in config.aux_taps:
        raise ConfigError(f"layer {l} is not an auxiliary RNN-T tap {config.aux_taps}")
    if decoder_leaves is None:
        decoder_leaves = gated_decoder(leaves)
    h = aux_mlp(align_to_top(h_enc_l, l, config), l, leaves)
    return join_grid(h, h_pred, decoder_leaves, config)


def ce_frame_posteriors(h_enc_l: Node, l: int, leaves, config: ModelConfig) -> Node:
    """Frame-state log-posteriors (B, T_l, |S|); linear head on the top layer."""
    if l not in config.ce_taps:
        raise ConfigError(f"layer {l} is not a CE tap {config.ce_taps}")
    p = leaves["ce_heads"]
    if l == config.encoder_layers:
        logits = dc.add(dc.matmul(h_enc_l, p[f"ce{l}.w"]), p[f"ce{l}.b"])
    else:
        hidden = dc.relu(dc.add(dc.matmul(h_enc_l, p[f"ce{l}.w1"]), p[f"ce{l}.b1"]))
        logits = dc.add(dc.matmul(hidden, p[f"ce{l}.w2"]), p[f"ce{l}.b2"])
    return dc.log_softmax(logits)


def expected_num_params(config: ModelConfig) -> int:
    """Architecture formula for the total trainable parameter count."""
    d, H, P, J, V = config.input_dim, config.encoder_hidden, config.pred_hidden, config.joint_hidden, config.vocab_size
    A, S, L = config.aux_mlp_hidden, config.state_vocab_size, config.encoder_layers

    def lstm_count(i, h):
        return i * 4 * h + h * 4 * h + 4 * h

    n = lstm_count(d, H) + (L - 1) * lstm_count(H, H)
    n += V * P + config.pred_layers * lstm_count(P, P)
    n += H * J + P * J + J + J * V + V
    n += len(config.aux_taps) * (H * A + A + A * H + H)
    for l in config.ce_taps:
        n += H * S + S if l == L else H * A + A + A * S + S
    return n
