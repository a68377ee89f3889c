"""Experiment configuration shared by the trainers and the CLI."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import InvalidConfig
from .nn import ModelConfig, OptimConfig

ALGORITHMS = ("diversify", "erm", "dann")


@dataclass
class ExperimentConfig:
    algorithm: str = "diversify"
    K: int = 3
    lambda1: float = 1.0  # step-3 class adversary
    lambda2: float = 1.0  # step-4 domain adversary (also the DANN reversal weight)
    temperature: float = 1.0
    odin_eps: float = 1e-3
    lr: float = 1e-2
    weight_decay: float = 5e-4
    decoupled_weight_decay: bool = False
    rounds: int = 10
    e2: int = 5
    e3: int = 5
    e4: int = 5
    epoch_budget: int = 150
    batch_size: int = 32
    train_ratio: float = 0.8
    seed: int = 0
    widths: tuple[int, ...] = (16, 32)
    kernel: int = 9
    bottleneck_dim: int = 256
    disc_hidden: int = 256
    disc_layers: int = 2
    freeze_featurizer_steps34: bool = False
    freeze_featurizer_step3: bool = False  # step 3 only; step 4 still updates the featurizer
    normalize_embeddings: bool = True
    refine_iters: int = 1  # hard centroid passes per round
    cluster_after_step3: bool = True  # refresh d' after step-3 training; False clusters before step 3
    ridge_scale: float = 1e-3
    threshold_quantile: float = 0.05

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise InvalidConfig(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if not 1 <= self.K <= 10:
            raise InvalidConfig(f"K must lie in [1, 10], got {self.K}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidConfig("reversal weights must be >= 0")
        if not self.temperature > 0:
            raise InvalidConfig("temperature must be > 0")
        if self.odin_eps < 0:
            raise InvalidConfig("odin_eps must be >= 0")
        if self.lr <= 0 or self.weight_decay < 0:
            raise InvalidConfig("lr must be > 0 and weight_decay >= 0")
        if self.rounds < 1 or min(self.e2, self.e3, self.e4) < 0 or self.e2 + self.e3 + self.e4 < 1:
            raise InvalidConfig("need rounds >= 1 and a positive number of epochs per round")
        if self.rounds * (self.e2 + self.e3 + self.e4) > self.epoch_budget:
            raise InvalidConfig(
                f"schedule {self.rounds} x ({self.e2}+{self.e3}+{self.e4}) exceeds the epoch budget {self.epoch_budget}")
        if self.refine_iters < 1:
            raise InvalidConfig("refine_iters must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not 0 < self.train_ratio < 1:
            raise InvalidConfig("train_ratio must lie in (0, 1)")
        if self.ridge_scale < 0 or not 0 <= self.threshold_quantile <= 1:
            raise InvalidConfig("ridge_scale must be >= 0 and threshold_quantile in [0, 1]")

    @property
    def epochs_per_round(self) -> int:
        return self.e2 + self.e3 + self.e4

    def model_config(self, channels: int, window: int) -> ModelConfig:
        return ModelConfig(channels, window, self.widths, self.kernel, self.bottleneck_dim,
                           self.disc_hidden, self.disc_layers)

    def optim_config(self) -> OptimConfig:
        return OptimConfig(self.lr, self.weight_decay, self.decoupled_weight_decay)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc

    def updated(self, **overrides) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def resolve_config(path=None, **overrides) -> ExperimentConfig:
    """Defaults < JSON file < explicit overrides (``None`` means not given)."""
    base = {}
    if path is not None:
        try:
            base = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    base.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(base)
