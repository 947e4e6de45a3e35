"""Run configuration files.

A run file is a YAML mapping with up to four sections: `model`, `train`,
`contrastive`, and `corpus`. Every key must name a real field; unknown keys
are rejected with the offending name so typos cannot silently fall back to
defaults. Loss weights live flat in the train section as `balance_weight`
and `contrastive_weight`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import yaml

from .contrastive import ContrastiveConfig
from .data import SyntheticCorpusSpec
from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .training import TrainConfig

_SECTIONS = ("model", "train", "contrastive", "corpus")


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    contrastive: ContrastiveConfig
    corpus: SyntheticCorpusSpec

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.contrastive.validate()
        self.corpus.validate()

    def to_dicts(self) -> dict:
        return {
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "contrastive": dataclasses.asdict(self.contrastive),
            "corpus": dataclasses.asdict(self.corpus),
        }

    @staticmethod
    def from_dicts(d: dict) -> "RunConfig":
        train = dict(d["train"])
        weights = train.pop("loss_weights", {})
        cfg = RunConfig(
            model=ModelConfig(**d["model"]),
            train=TrainConfig(loss_weights=LossWeights(**weights), **train),
            contrastive=ContrastiveConfig(**d["contrastive"]),
            corpus=SyntheticCorpusSpec(**d["corpus"]),
        )
        cfg.validate()
        return cfg


def _build_section(cls, section: dict, name: str, skip: tuple[str, ...] = ()):
    if section is None:
        section = {}
    if not isinstance(section, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    allowed = {f.name for f in dataclasses.fields(cls)} - set(skip)
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {name}.{key}")
    return cls(**section)


def parse_run_config(raw: dict | None) -> RunConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    for key in raw:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown section {key!r}")

    train_section = dict(raw.get("train") or {})
    weights = LossWeights(
        balance_weight=_pop_number(train_section, "balance_weight", 0.01),
        contrastive_weight=_pop_number(train_section, "contrastive_weight", 0.01),
    )
    cfg = RunConfig(
        model=_build_section(ModelConfig, raw.get("model"), "model"),
        train=_build_section(TrainConfig, train_section, "train",
                             skip=("loss_weights",)),
        contrastive=_build_section(ContrastiveConfig, raw.get("contrastive"),
                                   "contrastive"),
        corpus=_build_section(SyntheticCorpusSpec, raw.get("corpus"), "corpus"),
    )
    cfg.train.loss_weights = weights
    cfg.validate()
    return cfg


def _pop_number(section: dict, key: str, default: float) -> float:
    value = section.pop(key, default)
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ConfigError(f"train.{key} must be a number")
    return float(value)


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from e
    return parse_run_config(raw)
