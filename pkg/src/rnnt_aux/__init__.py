"""Transducer (RNN-T) training with auxiliary losses on intermediate encoder layers.

Everything runs on a small numpy autodiff core in float64, so each piece
can be checked against finite differences or brute-force enumeration.
"""

__version__ = "0.1.0"

from .config import RunConfig
from .data import SyntheticTaskSpec, generate_dataset, read_dataset, write_dataset
from .lattice import brute_force_rnnt_loss, rnnt_loss
from .losses import MODES, LossWeights, symmetric_kl, total_objective
from .model import ModelConfig, init_params
from .train import TrainConfig, train

__all__ = [
    "MODES", "LossWeights", "ModelConfig", "RunConfig", "SyntheticTaskSpec", "TrainConfig",
    "brute_force_rnnt_loss", "generate_dataset", "init_params", "read_dataset", "rnnt_loss",
    "symmetric_kl", "total_objective", "train", "write_dataset",
]
