"""Run configuration: one JSON document, strictly validated, echoed with defaults resolved."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field

from .data import SyntheticTaskSpec
from .losses import LossWeights
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def strict(cls, raw: dict | None, where: str, **overrides):
    """Build dataclass ``cls`` from ``raw``, rejecting unknown keys."""
    raw = dict(raw or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed {sorted(names)}")
    raw.update(overrides)
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


@dataclass
class DataConfig:
    synthetic: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    train_size: int = 500
    valid_size: int = 100
    test_size: int = 100
    train_path: str | None = None
    valid_path: str | None = None
    test_path: str | None = None

    def __post_init__(self):
        if isinstance(self.synthetic, dict):
            self.synthetic = strict(SyntheticTaskSpec, self.synthetic, "data.synthetic")


@dataclass
class DecodeConfig:
    beam_width: int = 1
    lm_weight: float = 0.0
    lm_order: int = 0  # 0 disables fusion
    max_symbols_per_frame: int = 10

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.lm_order not in (0, 1, 2):
            raise ValueError("lm_order must be 0, 1 or 2")


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    decode: DecodeConfig

    @property
    def mode(self) -> str:
        return self.train.mode

    @property
    def weights(self) -> LossWeights:
        return self.train.weights

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        allowed = {"model", "train", "data", "decode", "mode", "weights"}
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise ConfigError(f"unknown top-level key(s) {unknown}; allowed {sorted(allowed)}")
        data = strict(DataConfig, raw.get("data"), "data")
        model_raw = dict(raw.get("model") or {})
        model_raw.setdefault("vocab_size", data.synthetic.vocab_size)
        model_raw.setdefault("state_vocab_size", data.synthetic.state_vocab_size)
        model = strict(ModelConfig, model_raw, "model")
        train_raw = dict(raw.get("train") or {})
        for key in ("mode", "weights"):
            if key in train_raw:
                raise ConfigError(f"train.{key}: set '{key}' at the top level")
        weights = strict(LossWeights, raw.get("weights"), "weights")
        train = strict(TrainConfig, train_raw, "train", mode=raw.get("mode", "baseline"), weights=weights)
        decode = strict(DecodeConfig, raw.get("decode"), "decode")
        return cls(model, train, data, decode)

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls.from_dict({})
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e.msg})") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        train = self.train.as_dict()
        mode, weights = train.pop("mode"), train.pop("weights")
        model = asdict(self.model)
        for k in ("subsample_after", "aux_taps", "ce_taps"):
            model[k] = list(model[k])
        return {"mode": mode, "weights": weights, "model": model, "train": train,
                "data": asdict(self.data), "decode": asdict(self.decode)}

    def with_overrides(self, **kw) -> "RunConfig":
        raw = self.to_dict()
        for key, value in kw.items():
            if value is None:
                continue
            section, _, name = key.partition(".")
            if name:
                raw[section][name] = value
            else:
                raw[section] = value
        return RunConfig.from_dict(raw)
