"""Experiment configuration: one JSON document plus ``--set key=value`` overrides."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .synthdata import CorpusConfig


@dataclass
class ModelSpec:
    """Target architecture (the vocabulary size comes from the corpus)."""

    d_model: int = 32
    d_ff: int = 64
    n_encoder_blocks: int = 1
    n_decoder_blocks: int = 1
    max_source_len: int = 72
    max_answer_len: int = 4
    max_rows: int = 16
    max_cols: int = 8


@dataclass
class TrainSpec:
    epochs: int = 120
    batch_size: int = 16
    lr: float = 5e-3
    schedule: str = "cosine"
    final_lr_fraction: float = 0.05


@dataclass
class DPSpec:
    enabled: bool = False
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    target_epsilon: float | None = 8.0  # when set, overrides noise_multiplier
    delta: float | None = None  # default 1 / (10 * number of training pairs)


@dataclass
class AttackSpec:
    variant: str = "FL"
    layer: str = "final-projection"
    rank: int = 4
    lr: float = 1e-3
    max_steps: int = 200
    tau: float = 1e-3
    utility: str = "nls"
    max_questions: int = 10
    chunk_size: int = 64
    features: str = "all"
    normalization: str = "zscore"
    questions: str = "exact"  # or "template-variant"
    kmeans_restarts: int = 5


@dataclass
class BlackBoxSpec:
    matched_proxy: bool = False
    d_model: int = 48
    d_ff: int = 96
    n_encoder_blocks: int = 1
    n_decoder_blocks: int = 1
    pretrain_epochs: int = 30
    pretrain_lr: float = 3e-3
    distill_epochs: int = 50
    distill_batch_size: int = 8
    distill_lr: float = 3e-3
    distill_loss_floor: float = 1e-2
    query_budget: int | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    dp: DPSpec = field(default_factory=DPSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    blackbox: BlackBoxSpec = field(default_factory=BlackBoxSpec)
    baselines: list[str] = field(
        default_factory=lambda: ["score-ta", "score-ua", "score-ua-all", "loss-ta", "gradient-ua", "scoreloss-ua-all", "min-k", "min-k++"]
    )
    min_k_grid: list[float] = field(default_factory=lambda: [0.6, 0.7, 0.8, 0.9, 1.0])
    permutations: int = 200  # permuted-label control draws
    output_dir: str = "runs/default"
    cache_dir: str | None = None  # default: <output_dir>/../.cache

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Stable under key order; ignores where outputs go."""
        d = self.to_dict()
        for k in ("output_dir", "cache_dir"):
            d.pop(k)
        return stable_hash(d)


def stable_hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


class ConfigError(ValueError):
    pass


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    return cls(**kwargs)


_NESTED = {
    (ExperimentConfig, "corpus"): CorpusConfig,
    (ExperimentConfig, "model"): ModelSpec,
    (ExperimentConfig, "train"): TrainSpec,
    (ExperimentConfig, "dp"): DPSpec,
    (ExperimentConfig, "attack"): AttackSpec,
    (ExperimentConfig, "blackbox"): BlackBoxSpec,
}


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "config")


def parse_value(text: str) -> Any:
    """JSON literal if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    out = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override {key!r}: unknown key")
        node[parts[-1]] = parse_value(raw)
    return out


def load_config(path: str | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    data = ExperimentConfig().to_dict()
    if path:
        user = json.loads(Path(path).read_text())
        data = _merge(data, user, "config")
    return from_dict(apply_overrides(data, overrides or []))


def _merge(base: dict, user: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in user.items():
        if k not in out:
            raise ConfigError(f"{where}: unknown key {k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{where}.{k}")
        else:
            out[k] = v
    return out
