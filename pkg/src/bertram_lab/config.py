"""Run configuration: one JSON file, nested per pipeline step."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .encoder import PretrainConfig
from .rarify import AugmentConfig, FinetuneConfig
from .toydata import ToyConfig
from .training import BertramConfig, StageConfig


@dataclass
class VocabConfig:
    target_size: int = 2000
    min_whole_word_freq: int = 100
    lowercase: bool = True


@dataclass
class ModelConfig:
    n_layers: int = 2
    d: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 64


@dataclass
class EvalConfig:
    strategy: str = "replace"
    indomain: bool = False
    rare_threshold: int = 100
    max_contexts: int = 32
    holdout: int = 50
    holdout_contexts: int = 8


@dataclass
class PathsConfig:
    corpus: str = ""
    lexicon: str = ""
    probes: str = ""
    dataset: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    vocab: VocabConfig = field(default_factory=VocabConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    bertram: BertramConfig = field(default_factory=BertramConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


_NESTED = {
    (RunConfig, "paths"): PathsConfig, (RunConfig, "vocab"): VocabConfig,
    (RunConfig, "model"): ModelConfig, (RunConfig, "pretrain"): PretrainConfig,
    (RunConfig, "bertram"): BertramConfig, (RunConfig, "finetune"): FinetuneConfig,
    (RunConfig, "eval"): EvalConfig, (RunConfig, "toy"): ToyConfig,
    (BertramConfig, "stage1"): StageConfig, (BertramConfig, "stage2"): StageConfig,
    (BertramConfig, "stage3"): StageConfig, (FinetuneConfig, "augment"): AugmentConfig,
}


def _build(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        sub = _NESTED.get((cls, k))
        if sub is not None and isinstance(v, dict):
            v = _build(sub, v)
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


def _merge(base, data: dict):
    """Overlay a (possibly partial) dict onto a dataclass instance."""
    current = asdict(base)

    def deep(a: dict, b: dict) -> dict:
        out = dict(a)
        for k, v in b.items():
            out[k] = deep(a[k], v) if isinstance(v, dict) and isinstance(a.get(k), dict) else v
        return out

    return _build(type(base), deep(current, data))


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        cfg = _merge(cfg, json.loads(Path(path).read_text(encoding="utf-8")))
    if overrides:
        cfg = _merge(cfg, overrides)
    seed = cfg.seed
    cfg.pretrain.seed = seed
    cfg.bertram.seed = seed
    return cfg


def desk_preset() -> dict:
    """Settings for the full toy experiment."""
    return {}


def smoke_preset() -> dict:
    """A tiny configuration that exercises every step in well under a minute."""
    return {
        "vocab": {"target_size": 400, "min_whole_word_freq": 30},
        "model": {"d": 32, "n_heads": 2, "d_ff": 64, "max_len": 32},
        "pretrain": {"epochs": 2, "batch_size": 32},
        "bertram": {"train_min_freq": 30,
                    "stage1": {"epochs": 2, "lr": 5e-3, "words_per_batch": 16},
                    "stage2": {"epochs": 3, "lr": 1e-2, "words_per_batch": 32},
                    "stage3": {"epochs": 1, "lr": 2e-3, "words_per_batch": 16}},
        "finetune": {"epochs": 15, "batch_size": 16, "lr": 1e-2},
        "eval": {"holdout": 5, "rare_threshold": 30},
        "toy": {"n_frequent": 40, "n_medium": 10, "n_rare": 30, "n_misspelled": 8,
                "frequent_range": [30, 40], "n_dataset": 600},
    }


def is_config(obj) -> bool:
    return is_dataclass(obj)
