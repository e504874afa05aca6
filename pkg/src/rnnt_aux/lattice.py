"""Transducer loss on a (T', U+1, V) log-posterior grid.

Node (t, u) means "t frames consumed, u labels emitted".  From there a blank
moves to (t+1, u) and label ``y[u]`` moves to (t, u+1); every path ends with
the blank leaving (T'-1, U).
"""

from __future__ import annotations

import itertools
import math

import numpy as np

NEG = -1e30


class GridError(ValueError):
    pass


def _check_grid(grid, labels):
    grid = np.asarray(grid, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if grid.ndim != 3 or grid.shape[0] == 0 or grid.shape[2] == 0:
        raise GridError(f"grid must be a non-empty (T', U+1, V) array, got shape {grid.shape}")
    U = labels.shape[0]
    if U + 1 > grid.shape[1]:
        raise GridError(f"{U} labels need U+1={U + 1} grid rows, grid has {grid.shape[1]}")
    if U and (labels.min() < 1 or labels.max() >= grid.shape[2]):
        raise GridError("labels must lie in [1, V)")
    return grid, labels


def _transitions(grid, labels, frame_lengths, label_lengths):
    """Blank and emission log-probs (B, T', U+1) with out-of-utterance moves at NEG."""
    B, T, U1, _ = grid.shape
    blank = grid[..., 0].copy()
    emit = np.full((B, T, U1), NEG)
    t_idx = np.arange(T)[None, :, None]
    u_idx = np.arange(U1)[None, None, :]
    inside = (t_idx < frame_lengths[:, None, None]) & (u_idx <= label_lengths[:, None, None])
    blank[~inside] = NEG
    if U1 > 1:
        emit[:, :, :U1 - 1] = np.take_along_axis(grid[:, :, :U1 - 1], labels[:, None, :, None], axis=-1)[..., 0]
        emit[~(inside & (u_idx < label_lengths[:, None, None]))] = NEG
    return blank, emit


def _pad_labels(labels, U1):
    out = np.ones((len(labels), max(U1 - 1, 0)), dtype=np.int64)
    for b, y in enumerate(labels):
        out[b, :len(y)] = y
    return out


def _check_batch(grid, labels, frame_lengths):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 4 or 0 in grid.shape:
        raise GridError(f"batched grid must be a non-empty (B, T', U+1, V) array, got shape {grid.shape}")
    B, T, U1, V = grid.shape
    labels = [np.asarray(y, dtype=np.int64).reshape(-1) for y in labels]
    frame_lengths = np.asarray(frame_lengths, dtype=np.int64)
    label_lengths = np.array([len(y) for y in labels], dtype=np.int64)
    if len(labels) != B or frame_lengths.shape != (B,):
        raise GridError("need one label sequence and one frame length per batch entry")
    if np.any(label_lengths + 1 > U1):
        raise GridError(f"labels need up to {label_lengths.max() + 1} grid rows, grid has {U1}")
    if np.any(frame_lengths < 1) or np.any(frame_lengths > T):
        raise GridError(f"frame lengths must lie in 1..{T}")
    for y in labels:
        if y.size and (y.min() < 1 or y.max() >= V):
            raise GridError("labels must lie in [1, V)")
    return grid, _pad_labels(labels, U1), frame_lengths, label_lengths


def _alpha_beta(blank, emit, frame_lengths, label_lengths):
    B, T, U1 = blank.shape
    alpha = np.full((B, T, U1), NEG)
    beta = np.full((B, T, U1), NEG)
    alpha[:, 0, 0] = 0.0
    for d in range(1, T + U1 - 1):
        t = np.arange(max(0, d - U1 + 1), min(T, d + 1))
        u = d - t
        from_left = np.where(t > 0, alpha[:, t - 1, u] + blank[:, t - 1, u], NEG)
        from_below = np.where(u > 0, alpha[:, t, u - 1] + emit[:, t, u - 1], NEG)
        alpha[:, t, u] = np.logaddexp(from_left, from_below)
    bidx = np.arange(B)
    last_t, last_u = frame_lengths - 1, label_lengths
    final = blank[bidx, last_t, last_u]
    for d in range(T + U1 - 2, -1, -1):
        t = np.arange(max(0, d - U1 + 1), min(T, d + 1))
        u = d - t
        tn = np.minimum(t + 1, T - 1)
        un = np.minimum(u + 1, U1 - 1)
        via_blank = np.where(t + 1 < T, beta[:, tn, u] + blank[:, t, u], NEG)
        via_emit = np.where(u + 1 < U1, beta[:, t, un] + emit[:, t, u], NEG)
        beta[:, t, u] = np.logaddexp(via_blank, via_emit)
        hit = (last_t + last_u) == d
        if np.any(hit):
            beta[bidx[hit], last_t[hit], last_u[hit]] = final[hit]
    return alpha, beta, final


def rnnt_loss_batch(grid, labels, frame_lengths):
    """Losses (B,) and log-grid gradients for a padded (B, T', U+1, V) grid.

    Utterance ``b`` uses frames ``:frame_lengths[b]`` and rows ``:len(labels[b])+1``;
    every other entry gets zero gradient.
    """
    grid, y, frame_lengths, label_lengths = _check_batch(grid, labels, frame_lengths)
    blank, emit = _transitions(grid, y, frame_lengths, label_lengths)
    alpha, beta, final = _alpha_beta(blank, emit, frame_lengths, label_lengths)
    B, T, U1 = blank.shape
    bidx = np.arange(B)
    log_p = alpha[bidx, frame_lengths - 1, label_lengths] + final

    grad = np.zeros_like(grid)
    beta_next_t = np.full((B, T, U1), NEG)
    beta_next_t[:, :-1] = beta[:, 1:]
    beta_next_t[bidx, frame_lengths - 1, label_lengths] = 0.0
    grad[..., 0] = -np.exp(alpha + blank + beta_next_t - log_p[:, None, None])
    if U1 > 1:
        occ = np.exp(alpha[:, :, :-1] + emit[:, :, :-1] + beta[:, :, 1:] - log_p[:, None, None])
        np.put_along_axis(grad[:, :, :-1], y[:, None, :, None],
                          -occ[..., None], axis=-1)
    return -log_p, grad


def alpha_beta(grid, labels):
    """Forward and backward log-variables, both (T', U+1).

    ``alpha[t, u]`` is the log-probability of reaching node (t, u);
    ``beta[t, u]`` that of finishing from it, including the final blank.
    Computed along anti-diagonals so each diagonal is one vector op.
    """
    grid, labels = _check_grid(grid, labels)
    g, y, fl, ll = _check_batch(grid[None, :, :labels.shape[0] + 1], [labels], [grid.shape[0]])
    blank, emit = _transitions(g, y, fl, ll)
    alpha, beta, _ = _alpha_beta(blank, emit, fl, ll)
    return alpha[0], beta[0]


def rnnt_loss(grid, labels):
    """Negative log-likelihood of ``labels`` and its gradient w.r.t. the log grid.

    Rows beyond U get zero gradient.
    """
    grid, labels = _check_grid(grid, labels)
    U1 = labels.shape[0] + 1
    losses, g = rnnt_loss_batch(grid[None, :, :U1], [labels], [grid.shape[0]])
    grad = np.zeros_like(grid)
    grad[:, :U1] = g[0]
    return float(losses[0]), grad


def brute_force_rnnt_loss(grid, labels) -> float:
    """Sum over every alignment by explicit enumeration.  Needs T' + U <= 12."""
    grid, labels = _check_grid(grid, labels)
    T, U = grid.shape[0], labels.shape[0]
    if T + U > 12:
        raise GridError(f"brute force limited to T'+U <= 12, got {T + U}")
    terms = []
    # The last move is always the final blank; choose which of the first
    # T'-1+U moves are label emissions.
    n_moves = T - 1 + U
    for emit_pos in itertools.combinations(range(n_moves), U):
        emit_set = set(emit_pos)
        t = u = 0
        lp = 0.0
        for m in range(n_moves):
            if m in emit_set:
                lp += grid[t, u, labels[u]]
                u += 1
            else:
                lp += grid[t, u, 0]
                t += 1
        lp += grid[T - 1, U, 0]
        terms.append(lp)
    m = max(terms)
    return -(m + math.log(math.fsum(math.exp(v - m) for v in terms)))


def count_alignments(T: int, U: int) -> int:
    return math.comb(T - 1 + U, U)


def grid_for_kl(primary, aux, tol: float = 1e-9):
    """Check two log grids are the same shape and normalised at every (t, u)."""
    primary = np.asarray(primary, dtype=np.float64)
    aux = np.asarray(aux, dtype=np.float64)
    if primary.shape != aux.shape:
        raise GridError(f"grid shapes differ: {primary.shape} vs {aux.shape}")
    for name, g in (("primary", primary), ("aux", aux)):
        sums = np.exp(g).sum(axis=-1)
        bad = np.argwhere(np.abs(sums - 1.0) > tol)
        if bad.size:
            loc = tuple(int(i) for i in bad[0])
            raise GridError(f"{name} grid not normalised at (t,u)={loc[-2:]}: sum={sums[loc]:.12g}")
    return primary, aux
