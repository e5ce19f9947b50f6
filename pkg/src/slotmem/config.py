"""Run configuration: YAML files, named presets, typed validation.

A run config has four sections: top-level run controls (seed is mandatory,
everything else defaulted), ``model`` (overrides applied on top of
ModelConfig defaults; vocab_size and max_seq_len are derived from the
task), ``task`` (the recall benchmark shape), and ``optim``.

Presets are complete run configs checked in here; a YAML file may start
from one via a top-level ``preset:`` key and override any subset of
fields. Numeric strings are coerced to the field's declared type, so
``3e-3`` works even where the YAML parser reads it as a string.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .model import ModelConfig
from .mqar import MqarConfig


@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float = 3e-3
    floor_lr: float = 1e-4
    warmup_frac: float = 0.03
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass(frozen=True)
class TaskConfig:
    n_pairs: int = 4
    seq_len: int = 64
    n_keys: int | None = None
    n_values: int | None = None
    n_queries: int | None = None
    batch_size: int = 32
    eval_instances: int = 64

    def mqar(self, seed: int = 0) -> MqarConfig:
        return MqarConfig(
            n_pairs=self.n_pairs,
            seq_len=self.seq_len,
            n_keys=self.n_keys,
            n_values=self.n_values,
            n_queries=self.n_queries,
            seed=seed,
        )

    @property
    def vocab_size(self) -> int:
        return self.mqar().vocab_size


@dataclass(frozen=True)
class RunConfig:
    seed: int
    steps: int = 2000
    out_dir: str = "runs/default"
    eval_every: int = 250
    target_accuracy: float | None = 0.99
    model: dict = field(default_factory=dict)
    task: TaskConfig = field(default_factory=TaskConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be positive")

    def model_config(self) -> ModelConfig:
        overrides = dict(self.model)
        overrides.setdefault("vocab_size", self.task.vocab_size)
        overrides.setdefault("max_seq_len", self.task.seq_len)
        if "modes" in overrides and overrides["modes"] is not None:
            overrides["modes"] = tuple(tuple(r) for r in overrides["modes"])
        return ModelConfig(**overrides)


PRESETS: dict = {
    # Default development shape: two layers, two heads, 256 slots, Top-8.
    "desk": {
        "seed": 0,
        "steps": 20000,
        "eval_every": 250,
        "target_accuracy": 0.99,
        "out_dir": "runs/desk",
        "model": {
            "kind": "slot", "d_model": 128, "n_layers": 2, "n_heads": 2,
            "d_k": 16, "d_v": 32, "order": 4, "part_dim": 4, "top_k": 8,
            "tie_embeddings": False, "dtype": "float32",
        },
        "task": {"n_pairs": 4, "seq_len": 64, "batch_size": 32},
        "optim": {"peak_lr": 3e-3, "floor_lr": 1e-4, "warmup_frac": 0.03,
                  "weight_decay": 0.1, "grad_clip": 1.0},
    },
    # Minimal 8-slot decoder (order 3 over binary parts, Top-1): the
    # smallest shape where factorized decoding is visible end to end.
    "toy8": {
        "seed": 0,
        "steps": 500,
        "eval_every": 100,
        "target_accuracy": None,
        "out_dir": "runs/toy8",
        "model": {
            "kind": "slot", "d_model": 32, "n_layers": 2, "n_heads": 1,
            "d_k": 6, "d_v": 8, "order": 3, "part_dim": 2, "top_k": 1,
        },
        "task": {"n_pairs": 2, "seq_len": 16, "batch_size": 16},
        "optim": {"peak_lr": 3e-3, "floor_lr": 1e-4},
    },
    # Published large-model shape, for state accounting and parameter
    # invariance checks only; not trainable at desk scale.
    "shape-1024": {
        "seed": 0,
        "steps": 1,
        "eval_every": 1,
        "target_accuracy": None,
        "out_dir": "runs/shape-1024",
        "model": {
            "kind": "slot", "d_model": 1024, "n_layers": 27, "n_heads": 16,
            "d_k": 64, "d_v": 64, "order": 2, "part_dim": 32, "top_k": 8,
        },
        "task": {"n_pairs": 4, "seq_len": 64, "batch_size": 1},
        "optim": {},
    },
    # Published pretraining optimizer settings, kept as a named reference;
    # model/task stay at desk scale.
    "fullscale": {
        "seed": 0,
        "steps": 20000,
        "eval_every": 250,
        "target_accuracy": None,
        "out_dir": "runs/fullscale",
        "model": {
            "kind": "slot", "d_model": 128, "n_layers": 2, "n_heads": 2,
            "d_k": 16, "d_v": 32, "order": 4, "part_dim": 4, "top_k": 8,
        },
        "task": {"n_pairs": 4, "seq_len": 64, "batch_size": 32},
        "optim": {"peak_lr": 1e-3, "floor_lr": 1e-4, "warmup_frac": 0.05,
                  "weight_decay": 0.1, "grad_clip": 1.0},
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = val
    return out


def _coerce(ftype, value):
    if value is None:
        return None
    try:
        if ftype is int and not isinstance(value, bool):
            return int(value)
        if ftype is float:
            return float(value)
        if ftype is bool and isinstance(value, bool):
            return value
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot coerce {value!r} to {ftype.__name__}") from exc
    return value


_SIMPLE = {"int": int, "float": float, "bool": bool, "int | None": int,
           "float | None": float, "str": str}


def _build(dc_cls, data: dict):
    names = {f.name: f for f in dataclasses.fields(dc_cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown {dc_cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, val in data.items():
        ftype = _SIMPLE.get(names[key].type)
        kwargs[key] = _coerce(ftype, val) if ftype else val
    return dc_cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    preset = data.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; available: {sorted(PRESETS)}")
        data = _deep_merge(PRESETS[preset], data)
    if "seed" not in data or data["seed"] is None:
        raise ConfigError("run config must set a seed")
    task = _build(TaskConfig, data.pop("task", {}) or {})
    optim = _build(OptimConfig, data.pop("optim", {}) or {})
    model = data.pop("model", {}) or {}
    if not isinstance(model, dict):
        raise ConfigError("model section must be a mapping of ModelConfig overrides")
    top = {f.name: f for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - set(top)
    if unknown:
        raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
    for key in ("seed", "steps", "eval_every"):
        if key in data:
            data[key] = _coerce(int, data[key])
    if data.get("target_accuracy") is not None:
        data["target_accuracy"] = _coerce(float, data["target_accuracy"])
    return RunConfig(model=model, task=task, optim=optim, **data)


def load_config(path=None, preset: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Resolve preset -> file -> programmatic overrides, then validate.

    An explicit ``preset`` argument beats a ``preset:`` key in the file;
    file values override the preset's; ``overrides`` override everything.
    """
    data: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must hold a mapping at top level")
    if preset is not None:
        data["preset"] = preset
    if overrides:
        data = _deep_merge(data, overrides)
    return config_from_dict(data)


def dump_config(cfg: RunConfig, path) -> None:
    data = dataclasses.asdict(cfg)
    with open(path, "w") as fh:
        yaml.safe_dump(data, fh, sort_keys=False)
