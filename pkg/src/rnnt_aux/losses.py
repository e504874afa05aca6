"""Training objectives: transducer loss plus auxiliary RNN-T, symmetric KL and frame CE terms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import lattice
from .diffcore import Node
from .model import (ModelConfig, ParamSet, aux_posterior_grid, ce_frame_posteriors, encode,
                    join_grid, predict)

MODES = {
    "baseline": frozenset(),
    "aux": frozenset({"aux"}),
    "kl": frozenset({"kl"}),
    "aux+kl": frozenset({"aux", "kl"}),
    "ce": frozenset({"ce"}),
    "aux+kl+ce": frozenset({"aux", "kl", "ce"}),
}


@dataclass
class LossWeights:
    lambda_aux: float = 0.3
    lambda_ce: float = 0.6

    def __post_init__(self):
        for name in ("lambda_aux", "lambda_ce"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
            setattr(self, name, v)


@dataclass
class LossReport:
    primary_rnnt: float
    aux_rnnt: dict[int, float] = field(default_factory=dict)
    kl: dict[int, float] = field(default_factory=dict)
    ce: dict[int, float] = field(default_factory=dict)
    total: float = 0.0
    include_primary: bool = True

    def recombine(self, weights: LossWeights) -> float:
        prim = self.primary_rnnt if self.include_primary else 0.0
        return (prim + weights.lambda_aux * (sum(self.aux_rnnt.values()) + sum(self.kl.values()))
                + weights.lambda_ce * sum(self.ce.values()))

    def as_dict(self) -> dict:
        return {
            "primary_rnnt": self.primary_rnnt,
            "aux_rnnt": {str(k): v for k, v in self.aux_rnnt.items()},
            "kl": {str(k): v for k, v in self.kl.items()},
            "ce": {str(k): v for k, v in self.ce.items()},
            "total": self.total,
        }


# -- graph-level terms ---------------------------------------------------------------------

def transducer_nll(grid: Node, labels: list[np.ndarray], frame_lengths) -> Node:
    """Per-utterance transducer loss (B,) on a padded (B, T', U+1, V) grid."""
    losses, grad = lattice.rnnt_loss_batch(grid.value, labels, frame_lengths)
    return dc.custom(losses, (grid,), lambda g: (g[:, None, None, None] * grad,), "rnnt_loss")


def _kl_weights(shape, frame_lengths, label_lengths):
    # Rows 0..U-1 hold the distributions that predict y_1..y_U.
    B, T, U1 = shape
    w = np.zeros((B, T, U1))
    for b in range(B):
        Tb, Ub = int(frame_lengths[b]), int(label_lengths[b])
        if Ub > 0:
            w[b, :Tb, :Ub] = 1.0 / (Tb * Ub)
    return w


def kl_node(lp: Node, lq: Node, frame_lengths, label_lengths) -> Node:
    """Batch mean of the symmetric KL between two padded log grids."""
    cell = dc.sum(dc.mul(dc.sub(dc.exp(lp), dc.exp(lq)), dc.sub(lp, lq)), axis=-1)
    w = _kl_weights(cell.shape, frame_lengths, label_lengths) / cell.shape[0]
    return dc.sum(dc.mul(cell, dc.constant(w)))


def ce_node(frame_logprobs: Node, targets: np.ndarray, lengths) -> Node:
    """Batch mean of per-utterance frame-averaged cross-entropy."""
    B, T, S = frame_logprobs.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= S):
        raise ValueError(f"frame state index out of range [0, {S})")
    w = np.zeros((B, T))
    for b in range(B):
        w[b, :int(lengths[b])] = 1.0 / (int(lengths[b]) * B)
    return dc.neg(dc.sum(dc.mul(dc.pick(frame_logprobs, targets), dc.constant(w))))


# -- standalone array-level operations ---------------------------------------------------------

def symmetric_kl(primary, aux) -> float:
    """Symmetric KL between two (T', U+1, V) log grids, averaged over frames and label positions.

    Zero by convention when U = 0.
    """
    primary, aux = lattice.grid_for_kl(primary, aux)
    T, U1, _ = primary.shape
    node = kl_node(dc.constant(primary[None]), dc.constant(aux[None]), [T], [U1 - 1])
    return float(node.value)


def layered_symmetric_kl(primary, aux_grids: dict) -> float:
    return sum(symmetric_kl(primary, g) for g in aux_grids.values())


def aux_rnnt_objective(grids: dict, labels) -> tuple[float, dict]:
    """Sum of transducer losses over auxiliary grids keyed by tap layer."""
    terms = {}
    for l, grid in grids.items():
        grid = np.asarray(grid, dtype=np.float64)
        lattice.grid_for_kl(grid, grid)
        terms[l] = lattice.rnnt_loss(grid, labels)[0]
    return (sum(terms.values()) if terms else 0.0), terms


def aux_ce_objective(frame_logprobs: dict, states: dict) -> tuple[float, dict]:
    """Frame CE summed over taps; ``states[l]`` must already match layer ``l``'s frame count."""
    terms = {}
    for l, lp in frame_logprobs.items():
        lp = np.asarray(lp, dtype=np.float64)
        s = np.asarray(states[l], dtype=np.int64)
        if s.shape[0] != lp.shape[0]:
            raise ValueError(f"layer {l}: {lp.shape[0]} frames but {s.shape[0]} state labels")
        terms[l] = float(ce_node(dc.constant(lp[None]), s[None], [lp.shape[0]]).value)
    return (sum(terms.values()) if terms else 0.0), terms


# -- full objective ----------------------------------------------------------------------------

def total_objective(batch, leaves, config: ModelConfig, weights: LossWeights, mode: str = "baseline",
                    include_primary: bool = True, kl_detach_primary: bool = False,
                    frozen_decoder: dict | None = None) -> tuple[LossReport, Node]:
    """Build the training objective for a padded batch.

    ``leaves`` is ``{partition: {name: Node}}`` (see ``ParamSet.leaves``).
    The auxiliary branches reuse the decoder behind a closed gradient gate;
    passing ``frozen_decoder`` arrays instead evaluates that path with fixed
    decoder values, which is what the gate means and lets finite differences
    reproduce the gated gradient.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {sorted(MODES)}")
    if isinstance(leaves, ParamSet):
        leaves = leaves.constants()
    terms = MODES[mode]
    if "ce" in terms and batch.states is None:
        raise ValueError(f"mode {mode!r} needs frame states")

    enc = encode(batch.features, leaves, config, batch.frame_lengths)
    t_top = enc.top_lengths
    prefix = batch.prefixes()
    h_pred = predict(prefix, leaves, config)
    grid = join_grid(enc.top, h_pred, leaves, config)
    primary = dc.mean(transducer_nll(grid, batch.labels, t_top))

    report = LossReport(primary_rnnt=float(primary.value), include_primary=include_primary)
    parts = [primary] if include_primary else []
    aux_parts, ce_parts = [], []

    if terms & {"aux", "kl"} and config.aux_taps:
        if frozen_decoder is None:
            dec_aux = {"decoder": {k: dc.stop_gradient(v) for k, v in leaves["decoder"].items()}}
            h_pred_aux = dc.stop_gradient(h_pred)
        else:
            dec_aux = {"decoder": {k: dc.constant(v) for k, v in frozen_decoder.items()}}
            h_pred_aux = predict(prefix, dec_aux, config)
        lp_for_kl = dc.stop_gradient(grid) if kl_detach_primary else grid
        for l in config.aux_taps:
            aux_grid = aux_posterior_grid(enc.layers[l - 1], l, h_pred_aux, leaves, config, dec_aux)
            if "aux" in terms:
                term = dc.mean(transducer_nll(aux_grid, batch.labels, t_top))
                report.aux_rnnt[l] = float(term.value)
                aux_parts.append(term)
            if "kl" in terms:
                term = kl_node(lp_for_kl, aux_grid, t_top, batch.label_lengths)
                report.kl[l] = float(term.value)
                aux_parts.append(term)

    if "ce" in terms:
        for l in config.ce_taps:
            stride = config.layer_stride(l)
            lp_s = ce_frame_posteriors(enc.layers[l - 1], l, leaves, config)
            targets = batch.states[:, ::stride][:, :lp_s.shape[1]]
            term = ce_node(lp_s, targets, enc.lengths[l - 1])
            report.ce[l] = float(term.value)
            ce_parts.append(term)

    if aux_parts:
        s = aux_parts[0]
        for term in aux_parts[1:]:
            s = dc.add(s, term)
        parts.append(dc.scale(s, weights.lambda_aux))
    if ce_parts:
        s = ce_parts[0]
        for term in ce_parts[1:]:
            s = dc.add(s, term)
        parts.append(dc.scale(s, weights.lambda_ce))
    if not parts:
        raise ValueError("objective is empty: primary term removed and no auxiliary terms active")
    total = parts[0]
    for term in parts[1:]:
        total = dc.add(total, term)
    report.total = float(total.value)
    return report, total
