"""Experiment config files: flat ``namespace.key = value`` lines.

Values are JSON literals (numbers, ``"strings"``, ``[lists]``, ``true``,
``null``); lines starting with ``#`` are comments.  Namespaces are ``model``, ``memory``,
``train`` and ``data``.  Example::

    model.layers = 12
    memory.pattern = "interleaved"
    memory.num_lrm = 2
    train.seed = 0
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import DataConfig
from .memory import MemoryConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


_MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name != "memory"]
_MEMORY_KEYS = [f.name for f in fields(MemoryConfig) if f.name != "num_layers"]
_TRAIN_KEYS = [f.name for f in fields(TrainConfig)]
_DATA_KEYS = [f.name for f in fields(DataConfig)]


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig

    @property
    def memory(self) -> MemoryConfig:
        return self.model.memory

    def with_memory(self, **changes) -> "ExperimentConfig":
        return replace(self, model=replace(self.model, memory=replace(self.model.memory, **changes)))

    def with_train(self, **changes) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, **changes))

    def to_flat(self) -> dict:
        flat = {}
        for k in _MODEL_KEYS:
            flat["model." + k] = getattr(self.model, k)
        for k in _MEMORY_KEYS:
            v = getattr(self.model.memory, k)
            flat["memory." + k] = list(v) if isinstance(v, tuple) else v
        for k in _TRAIN_KEYS:
            flat["train." + k] = getattr(self.train, k)
        for k in _DATA_KEYS:
            v = getattr(self.data, k)
            flat["data." + k] = list(v) if isinstance(v, tuple) else v
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "ExperimentConfig":
        groups: dict[str, dict] = {"model": {}, "memory": {}, "train": {}, "data": {}}
        allowed = {"model": _MODEL_KEYS, "memory": _MEMORY_KEYS, "train": _TRAIN_KEYS, "data": _DATA_KEYS}
        for key, value in flat.items():
            ns, _, name = key.partition(".")
            if ns not in groups or name not in allowed[ns]:
                raise ConfigError(f"unknown config key {key!r}")
            groups[ns][name] = value
        model = dict(groups["model"])
        layers = model.get("layers", DEFAULT.model.layers)
        mem = {f.name: getattr(DEFAULT.memory, f.name) for f in fields(MemoryConfig)}
        mem.update(num_layers=layers, num_lrm=None, lrm_layers=None)
        mem.update(groups["memory"])
        if mem["lrm_layers"] is not None:
            mem["lrm_layers"] = tuple(mem["lrm_layers"])
        try:
            memory = MemoryConfig(**mem)
            base = {f.name: getattr(DEFAULT.model, f.name) for f in fields(ModelConfig)}
            base.update(model, memory=memory)
            train = replace(DEFAULT.train, **groups["train"])
            data = DataConfig(**{**{"path": DEFAULT.data.path, "split": DEFAULT.data.split}, **groups["data"]})
            return cls(ModelConfig(**base), train, data)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e


DEFAULT = ExperimentConfig(
    model=ModelConfig(layers=12, d_model=128, heads=4, window=64,
                      memory=MemoryConfig(num_layers=12, lrm_length=192, srm_length=32)),
    train=TrainConfig(),
    data=DataConfig(),
)


def dumps(config: ExperimentConfig) -> str:
    lines = [f"{k} = {json.dumps(v)}" for k, v in config.to_flat().items()]
    return "\n".join(lines) + "\n"


def loads(text: str) -> ExperimentConfig:
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        try:
            flat[key] = json.loads(value.strip())
        except json.JSONDecodeError as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e.msg}") from None
    return ExperimentConfig.from_flat(flat)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return loads(text)


def save(config: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(config))
