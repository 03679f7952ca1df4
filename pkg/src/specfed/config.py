"""JSON experiment configuration: schema, defaults and validation.

Sections: ``data``, ``model``, ``federation``, ``output`` plus a top-level
``seed``.  Required keys are ``data.task``, ``federation.num_clients``,
``federation.rounds``, ``federation.lambda`` and ``federation.top_k``.  Unknown
keys are rejected so typos surface before any work starts.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .exceptions import ConfigError
from .federation import RoundConfig
from .models import TASKS, ModelConfig

# key -> (accepted types, required)
_NUM = (int, float)
SCHEMA = {
    "seed": (int, False),
    "data": {
        "task": (str, True),
        "image_size": (int, False),
        "num_classes": (int, False),
        "num_modalities": (int, False),
        "num_samples": (int, False),
        "test_fraction": (_NUM, False),
        "sr_scale": (int, False),
        "probe_pairs": (int, False),
        "partition": {
            "mode": (str, False),
            "gamma": (_NUM, False),
            "overlap": (_NUM, False),
        },
    },
    "model": {
        "patch_size": (int, False),
        "dim": (int, False),
        "depth": (int, False),
        "tokenizer_hidden": (int, False),
        "bands": (int, False),
        "sectors": (int, False),
        "cutoff": (_NUM, False),
        "head_dim": ((int, type(None)), False),
        "suffix_tokens": (int, False),
        "prefix_mode": (str, False),
        "retrieval": (str, False),
        "fusion": (str, False),
        "prompting": (str, False),
        "identity_standins": (bool, False),
    },
    "federation": {
        "num_clients": (int, True),
        "rounds": (int, True),
        "participation": (_NUM, False),
        "local_epochs": (int, False),
        "lr": (_NUM, False),
        "lambda": (_NUM, True),
        "top_k": (int, True),
        "batch_size": (int, False),
        "rho": (_NUM, False),
        "delta": (_NUM, False),
        "window": (int, False),
        "max_size": ((int, type(None)), False),
    },
    "output": {
        "dir": (str, False),
        "curves": (bool, False),
        "checkpoint": (bool, False),
    },
}
REQUIRED_SECTIONS = ("data", "federation")
PARTITION_MODES = ("dirichlet", "disjoint", "overlapping")


def _validate(node: dict, schema: dict, path: str) -> None:
    if not isinstance(node, dict):
        raise ConfigError(f"{path or 'config'} must be an object", path or None)
    for key in node:
        if key not in schema:
            raise ConfigError(f"unknown key {path + key}", path + key)
    for key, spec in schema.items():
        full = path + key
        if isinstance(spec, dict):
            if key in node:
                _validate(node[key], spec, full + ".")
            elif not path and key in REQUIRED_SECTIONS:
                raise ConfigError(f"missing required section {full}", full)
            continue
        types, required = spec
        if key not in node:
            if required:
                raise ConfigError(f"missing required key {full}", full)
            continue
        value = node[key]
        if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
            raise ConfigError(f"{full} has the wrong type", full)
        if not isinstance(value, types):
            raise ConfigError(f"{full} has the wrong type", full)


@dataclass
class DataConfig:
    task: str = "classification"
    image_size: int = 32
    num_classes: int = 4
    num_modalities: int = 3
    num_samples: int = 2000
    test_fraction: float = 0.2
    sr_scale: int = 2
    probe_pairs: int = 100
    partition: dict = field(default_factory=lambda: {"mode": "dirichlet", "gamma": 0.5, "overlap": 0.5})

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"data.task must be one of {TASKS}", "data.task")
        if self.num_samples < 1:
            raise ConfigError("data.num_samples must be >= 1", "data.num_samples")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("data.test_fraction must lie in (0, 1)", "data.test_fraction")
        if self.partition.get("mode", "dirichlet") not in PARTITION_MODES:
            raise ConfigError(f"data.partition.mode must be one of {PARTITION_MODES}", "data.partition.mode")


@dataclass
class OutputConfig:
    dir: str = "out"
    curves: bool = True
    checkpoint: bool = True


@dataclass
class ExperimentConfig:
    data: DataConfig
    model: ModelConfig
    federation: RoundConfig
    output: OutputConfig
    seed: int = 0

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        for key in ("task", "image_size", "num_classes", "sr_scale", "channels"):
            model.pop(key)
        fed = self.federation.to_dict()
        fed.pop("seed")
        return {"seed": self.seed, "data": asdict(self.data), "model": model,
                "federation": fed, "output": asdict(self.output)}

    def with_seed(self, seed: int) -> ExperimentConfig:
        d = self.to_dict()
        d["seed"] = seed
        return parse_config(d)

    def updated(self, section: str, **values) -> ExperimentConfig:
        d = self.to_dict()
        d[section].update(values)
        return parse_config(d)


def parse_config(raw: dict) -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    _validate(raw, SCHEMA, "")
    seed = raw.get("seed", 0)
    data_raw = raw["data"]
    partition = {"mode": "dirichlet", "gamma": 0.5, "overlap": 0.5, **data_raw.pop("partition", {})}
    data = DataConfig(**data_raw, partition=partition)
    model = ModelConfig.from_dict({**raw.get("model", {}), "task": data.task, "image_size": data.image_size,
                                   "num_classes": data.num_classes, "sr_scale": data.sr_scale})
    fed = RoundConfig.from_dict({**raw["federation"], "seed": seed})
    out = OutputConfig(**raw.get("output", {}))
    return ExperimentConfig(data, model, fed, out, seed)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from exc
    return parse_config(raw)
