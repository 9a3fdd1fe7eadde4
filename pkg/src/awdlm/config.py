"""Run configuration, presets and validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .model import ModelConfig


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class RunConfig:
    model: str = "awd"
    train_dir: str | None = None
    valid_dir: str | None = None
    test_dir: str | None = None
    vocab_path: str | None = None
    checkpoint_path: str | None = None

    min_freq: int = 2
    max_vocab: int = 60000

    emb: int = 400
    hidden: int = 1150
    layers: int = 3
    dropout_mult: float = 0.5
    tie_weights: bool = False

    batch_size: int = 32
    bptt: int = 70
    variable_bptt: bool = True
    phase1_epochs: int = 4
    phase2_epochs: int = 4
    phase1_lr: float = 1e-1
    # input side first: (embedding + LSTM1), LSTM2, (LSTM3 + decoder)
    group_lrs: list[float] = field(default_factory=lambda: [1e-2, 1e-2, 1e-4])
    unfreeze: str = "all"
    weight_decay: float = 0.1
    optimizer: str = "adam"
    sgdr: bool = True
    sgdr_min_ratio: float = 0.01
    nonmono: int = 5
    clip: float = 0.0
    seed: int = 0

    def validate(self) -> "RunConfig":
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg)

        need(self.model in ("awd", "ngram"), "model", "must be 'awd' or 'ngram'")
        need(self.min_freq >= 1, "min_freq", "must be >= 1")
        need(self.max_vocab >= 4, "max_vocab", "must be >= 4")
        for name in ("emb", "hidden", "layers", "batch_size"):
            need(isinstance(getattr(self, name), int) and getattr(self, name) >= 1, name, "must be a positive integer")
        need(self.bptt >= 2, "bptt", "must be >= 2")
        need(0.0 <= self.dropout_mult < 1.0, "dropout_mult", "must lie in [0, 1)")
        need(self.phase1_epochs >= 0 and self.phase2_epochs >= 0, "phase1_epochs", "epochs must be >= 0")
        need(self.phase1_lr > 0, "phase1_lr", "must be positive")
        need(len(self.group_lrs) == self.layers, "group_lrs", f"needs one rate per layer group ({self.layers})")
        need(all(lr > 0 for lr in self.group_lrs), "group_lrs", "rates must be positive")
        need(self.unfreeze in ("all", "gradual"), "unfreeze", "must be 'all' or 'gradual'")
        need(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        need(self.optimizer in ("adam", "sgd", "asgd"), "optimizer", "must be adam, sgd or asgd")
        need(0.0 <= self.sgdr_min_ratio <= 1.0, "sgdr_min_ratio", "must lie in [0, 1]")
        need(self.nonmono >= 1, "nonmono", "must be >= 1")
        need(self.clip >= 0, "clip", "must be >= 0")
        return self

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.emb, self.hidden, self.layers,
                           self.dropout_mult, self.tie_weights)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


PRESETS: dict[str, dict[str, Any]] = {
    "paper": {},
    # scaled down for laptop-sized runs and the acceptance tests
    "desk": dict(emb=32, hidden=64, max_vocab=2000, min_freq=1, batch_size=8, bptt=20,
                 phase1_epochs=1, phase2_epochs=8, phase1_lr=2e-2, group_lrs=[2e-2, 2e-2, 2e-2],
                 dropout_mult=0.1, weight_decay=0.0, clip=1.0),
    # two-layer unregularised baseline trained with plain SGD
    "simple": dict(layers=2, emb=200, hidden=200, dropout_mult=0.0, optimizer="sgd",
                   phase1_epochs=0, phase2_epochs=10, group_lrs=[1.0, 1.0], sgdr=False,
                   weight_decay=0.0, clip=5.0, variable_bptt=False, bptt=35),
}


def simple_lstm_config() -> RunConfig:
    return make_config("simple")


def make_config(preset: str = "paper", overrides: dict[str, Any] | None = None,
                config_file: str | Path | None = None) -> RunConfig:
    """Preset, then config-file values, then explicit overrides."""
    if preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}")
    values: dict[str, Any] = dict(PRESETS[preset])
    if config_file is not None:
        try:
            values.update(json.loads(Path(config_file).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", str(exc)) from None
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in values:
        if key not in known:
            raise ConfigError(key, "unknown configuration key")
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from None
    return cfg.validate()
