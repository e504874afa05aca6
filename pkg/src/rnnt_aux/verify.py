"""Numerical verification harnesses behind the ``gradcheck`` and ``oracle-check`` commands."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from . import lattice
from .data import SyntheticTaskSpec, collate, generate_dataset
from .losses import MODES, LossWeights, total_objective
from .model import ModelConfig, init_params


GRADCHECK_FLOOR = 1e-5


def toy_batch(seed: int = 0, n: int = 2, spec: SyntheticTaskSpec | None = None):
    """Small batch with T <= 8 and U <= 4 from the default task."""
    spec = spec or SyntheticTaskSpec(u_min=2, u_max=4, dur_min=1, dur_max=2, seed=seed)
    ds = generate_dataset(spec, n)
    return collate(ds.utterances), ds


def gradcheck_mode(mode: str, config: ModelConfig | None = None, weights: LossWeights | None = None,
                   seed: int = 0, step: float = 1e-5, tol: float = 1e-4, samples_per_array: int = 3,
                   batch=None, floor: float = GRADCHECK_FLOOR) -> dict:
    """Finite-difference check of the full objective in ``mode``.

    The auxiliary path is evaluated with the decoder frozen at its base
    value, which is the function the gated gradient differentiates.
    ``floor`` bounds the relative-error denominator from below: with a loss
    near 20 the central differences carry about 1e-10 of roundoff, so deep
    encoder coordinates with gradients near 1e-7 are unresolvable in
    relative terms and are effectively held to ``tol * floor`` absolute.  The
    report also records how far the gated reverse pass is from that frozen
    reverse pass (expected to be exactly zero).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    weights = weights or LossWeights()
    if batch is None:
        batch, ds = toy_batch(seed)
        config = config or ModelConfig(state_vocab_size=ds.state_vocab_size, vocab_size=ds.vocab_size)
    params = init_params(config, seed)
    frozen = {k: v.copy() for k, v in params["decoder"].items()}

    def f(leaves):
        return total_objective(batch, leaves, config, weights, mode, frozen_decoder=frozen)[1]

    report = dc.finite_diff_check(f, params.arrays, step=step, tol=tol,
                                  samples_per_array=samples_per_array, seed=seed, floor=floor)

    frozen_leaves, gated_leaves = params.leaves(), params.leaves()
    dc.backward(f(frozen_leaves))
    dc.backward(total_objective(batch, gated_leaves, config, weights, mode)[1])
    gap = 0.0
    for part, group in gated_leaves.items():
        for name, node in group.items():
            gap = max(gap, float(np.max(np.abs(node.grad - frozen_leaves[part][name].grad), initial=0.0)))
    report["gate_vs_frozen_max_abs"] = gap
    report["passed"] = report["passed"] and gap <= 1e-12
    report["mode"] = mode
    return report


def random_log_grid(rng, T, U, V):
    z = rng.normal(size=(T, U + 1, V)) * 2.0
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def oracle_check(instances: int = 200, seed: int = 0, max_T: int = 4, max_U: int = 3, max_V: int = 4) -> dict:
    """Forward-backward loss versus explicit alignment enumeration on random grids."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        T = int(rng.integers(1, max_T + 1))
        U = int(rng.integers(0, max_U + 1))
        V = int(rng.integers(2, max_V + 1))
        grid = random_log_grid(rng, T, U, V)
        y = rng.integers(1, V, size=U)
        fast, _ = lattice.rnnt_loss(grid, y)
        worst = max(worst, abs(fast - lattice.brute_force_rnnt_loss(grid, y)))
    return {"instances": instances, "max_abs_diff": worst, "passed": worst <= 1e-9}
