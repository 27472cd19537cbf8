"""Experiment configuration: one JSON document with dotted-path overrides.

Schema (every key is optional in a file; missing keys come from the preset
named by ``"preset"``, default ``toy``)::

    {
      "preset": "toy",
      "seed": 0,
      "mode": "tagged" | "source_only",
      "workers": 1,
      "toy": {"languages": [{"name", "transform", "shift"}, ...],
              "pivot": {"name", "transform", "shift"},
              "n_train", "n_dev", "n_test", "latent_vocab", "min_len", "max_len"},
      "bpe": {"merge_count": int},
      "model": {ModelConfig fields except vocab_size and n_control_tokens},
      "train": {TrainConfig fields},
      "decode": {DecodeConfig fields},
      "selflearn": {"l1", "l2", "n_rounds", "epochs_per_round",
                    "decode": {DecodeConfig fields}, "eval_decode": {...}}
    }

Overrides look like ``train.learning_rate=0.001`` or ``toy.n_train=200``; the
value is parsed as JSON when possible and kept as a string otherwise.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, fields
from pathlib import Path
from typing import Iterable, Optional

from . import __version__
from .corpus import MODES, ToyLanguageSpec
from .decoder import DecodeConfig
from .selflearn import SelfLearnConfig
from .trainer import TrainConfig
from .transformer import ModelConfig


class ConfigError(ValueError):
    pass


def _model_defaults() -> dict:
    d = {f.name: f.default for f in fields(ModelConfig) if f.name not in ("vocab_size", "n_control_tokens")}
    return d


_TOY = {
    "seed": 0,
    "mode": "tagged",
    "workers": 1,
    "toy": {
        "languages": [
            {"name": "a", "transform": "identity", "shift": 0},
            {"name": "b", "transform": "identity", "shift": 0},
        ],
        "pivot": {"name": "c", "transform": "identity", "shift": 0},
        "n_train": 500,
        "n_dev": 100,
        "n_test": 100,
        "latent_vocab": 64,
        "min_len": 3,
        "max_len": 12,
    },
    "bpe": {"merge_count": 0},
    "model": dict(
        _model_defaults(),
        n_layers=2,
        d_model=64,
        n_heads=4,
        d_ff=128,
        max_len=30,
        dropout=0.1,
        embedding_dropout=0.1,
    ),
    "train": dict(
        asdict(TrainConfig()),
        learning_rate=0.004,
        warmup_steps=400,
        batch_size_tokens=512,
        eval_interval_steps=250,
        max_steps=1000,
        dev_metric="bleu_smoothed",
    ),
    "decode": dict(asdict(DecodeConfig()), mode="greedy", max_len=30),
    "selflearn": {
        "l1": "a",
        "l2": "b",
        "n_rounds": 3,
        "epochs_per_round": 3,
        # one ancestral draw per sentence: best-of-5 is nearly as mode-seeking as beam on a sharp toy model
        "decode": dict(asdict(DecodeConfig()), mode="sample", sample_size=1, tag_policy="force", beam_size=4, max_len=30),
        "eval_decode": dict(asdict(DecodeConfig()), mode="greedy", tag_policy="free", max_len=30),
    },
}

# Published settings: six layers, BPE 12000 merges, dropout 0.3, embedding
# dropout 0.2, Adam 3e-4 with 16000 warmup steps, 4096-token batches, beam 10,
# five self-learning rounds of three epochs.  Width is not published.
_PAPER = copy.deepcopy(_TOY)
_PAPER["bpe"]["merge_count"] = 12000
_PAPER["model"].update(
    n_layers=6, d_model=512, n_heads=8, d_ff=2048, max_len=100, dropout=0.3,
    embedding_dropout=0.2, embedding_dropout_kind="element",
)
_PAPER["train"].update(asdict(TrainConfig()))
_PAPER["decode"].update(mode="beam", beam_size=10, max_len=100)
_PAPER["selflearn"].update(n_rounds=5, epochs_per_round=3)
_PAPER["selflearn"]["decode"].update(beam_size=10, sample_size=5, max_len=100)
_PAPER["selflearn"]["eval_decode"].update(mode="beam", beam_size=10, max_len=100)

PRESETS = {"toy": _TOY, "paper": _PAPER}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(tree: dict, path: str, value) -> None:
    keys = path.split(".")
    node = tree
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"unknown config key {path!r}")
        node = node[k]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"unknown config key {path!r}")
    node[keys[-1]] = value


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for k, v in update.items():
        where = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, where + ".")
        else:
            base[k] = v


def _spec(d: dict) -> ToyLanguageSpec:
    return ToyLanguageSpec(d["name"], transform=d.get("transform", "identity"), shift=d.get("shift", 0))


class ExperimentConfig:
    """Validated nested configuration; typed views build the module configs."""

    def __init__(self, tree: dict, preset: str = "toy"):
        self.preset = preset
        self.tree = tree
        self.validate()

    # -- construction ----------------------------------------------------

    @classmethod
    def from_preset(cls, name: str = "toy", overrides: Iterable[str] = ()) -> "ExperimentConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r} (choose from {sorted(PRESETS)})")
        tree = copy.deepcopy(PRESETS[name])
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
            _set_path(tree, key.strip(), _parse_value(value))
        return cls(tree, name)

    @classmethod
    def from_dict(cls, data: dict, overrides: Iterable[str] = ()) -> "ExperimentConfig":
        data = copy.deepcopy(data)
        name = data.pop("preset", "toy")
        data.pop("version", None)
        cfg = cls.from_preset(name)
        _merge(cfg.tree, data)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
            _set_path(cfg.tree, key.strip(), _parse_value(value))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: Iterable[str] = ()) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data, overrides)

    # -- validation and views ---------------------------------------------

    def validate(self) -> None:
        t = self.tree
        if t["mode"] not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {t['mode']!r}")
        if not isinstance(t["seed"], int) or t["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        if not isinstance(t["workers"], int) or t["workers"] < 1:
            raise ConfigError("workers must be >= 1")
        if not isinstance(t["bpe"]["merge_count"], int) or t["bpe"]["merge_count"] < 0:
            raise ConfigError("bpe.merge_count must be a non-negative integer")
        try:
            self.toy_specs()
            self.model_config(vocab_size=8)
            self.train_config()
            self.decode_config()
            self.selflearn_config()
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @property
    def seed(self) -> int:
        return self.tree["seed"]

    @property
    def mode(self) -> str:
        return self.tree["mode"]

    @property
    def tagged(self) -> bool:
        return self.mode == "tagged"

    @property
    def workers(self) -> int:
        return self.tree["workers"]

    @property
    def merge_count(self) -> int:
        return self.tree["bpe"]["merge_count"]

    def toy_specs(self) -> tuple[list[ToyLanguageSpec], ToyLanguageSpec]:
        toy = self.tree["toy"]
        return [_spec(d) for d in toy["languages"]], _spec(toy["pivot"])

    def model_config(self, vocab_size: int, n_control_tokens: int = 4) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, n_control_tokens=n_control_tokens, **self.tree["model"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**dict(self.tree["train"], seed=self.seed))

    def decode_config(self, **changes) -> DecodeConfig:
        return DecodeConfig(**dict(self.tree["decode"], seed=self.seed, **changes))

    def selflearn_config(self) -> SelfLearnConfig:
        s = self.tree["selflearn"]
        return SelfLearnConfig(
            l1=s["l1"],
            l2=s["l2"],
            n_rounds=s["n_rounds"],
            epochs_per_round=s["epochs_per_round"],
            decode=DecodeConfig(**dict(s["decode"], seed=self.seed)),
            eval_decode=DecodeConfig(**dict(s["eval_decode"], seed=self.seed)),
            seed=self.seed,
        )

    # -- serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        return dict(copy.deepcopy(self.tree), preset=self.preset, version=__version__)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.dumps(), encoding="utf-8")


def resolve(config_path: Optional[str], preset: Optional[str], overrides: Iterable[str]) -> ExperimentConfig:
    if config_path:
        return ExperimentConfig.load(config_path, overrides)
    return ExperimentConfig.from_preset(preset or "toy", overrides)
