"""Flat ``key = value`` run configuration.

Resolution order: built-in defaults, then the file, then ``--set`` overrides.
Unknown keys and values that do not parse as the key's type are rejected
with a ``ConfigError`` naming the key.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from .data import SyntheticTask
from .engine import MethodConfig
from .errors import ConfigError
from .gates import parse_schedule
from .model import ModelSpec


@dataclass
class RunConfig:
    # model
    depth: int = 4
    width: int = 32
    heads: int = 4
    seq_len: int = 16
    replaced: tuple = (1, 2, 3, 4)
    num_classes: int = 8
    num_colors: int = 4
    # method
    method: str = "dcr"
    schedule: str = "auto"
    dfg_weight: float = 1.0
    dfg_schedule: str = "dcr_aggr20"
    tau: float = 1.0
    kd_temperature: float = 4.0
    kd_weight: float = 1.0
    per_example_gates: bool = False
    # optimisation
    epochs: int = 12
    batch_size: int = 16
    lr: float = 5e-3
    min_lr: float = 1e-6
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    label_smoothing: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # data and bookkeeping
    seed: int = 0
    data_seed: int = 1234
    train_size: int = 4096
    val_size: int = 1024
    eval_points: int = 50
    threshold_frac: float = 0.9
    out_dir: str = "runs/latest"
    teacher_path: str = ""
    teacher_seed: int = 0
    teacher_epochs: int = 8
    teacher_lr: float = 3e-3
    teacher_batch_size: int = 64

    def __post_init__(self):
        self.model_spec()
        self.method_config()
        if self.batch_size < 1 or self.epochs < 1 or self.eval_points < 1:
            raise ConfigError("batch_size, epochs and eval_points must be positive", key="batch_size")
        if not 0.0 < self.threshold_frac <= 1.0:
            raise ConfigError("threshold_frac must be in (0, 1]", key="threshold_frac")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive", key="clip_norm")
        for key in ("lr", "teacher_lr"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive", key=key)
        for key in ("min_lr", "weight_decay", "adam_eps"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be nonnegative", key=key)
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)", key="label_smoothing")
        for key in ("teacher_epochs", "teacher_batch_size", "train_size", "val_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive", key=key)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(depth=self.depth, width=self.width, heads=self.heads, seq_len=self.seq_len,
                         replaced=self.replaced, num_classes=self.num_classes,
                         vocab_size=self.task().vocab_size)

    def task(self) -> SyntheticTask:
        return SyntheticTask(seed=self.data_seed, seq_len=self.seq_len, num_colors=self.num_colors,
                             num_classes=self.num_classes, train_size=self.train_size, val_size=self.val_size)

    def method_config(self) -> MethodConfig:
        schedule = None if self.schedule == "auto" else parse_schedule(self.schedule)
        return MethodConfig(kind=self.method, schedule=schedule, dfg_weight=self.dfg_weight,
                            dfg_schedule=parse_schedule(self.dfg_schedule), tau=self.tau,
                            kd_temperature=self.kd_temperature, kd_weight=self.kd_weight,
                            per_example_gates=self.per_example_gates)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(i) for i in v)
    return repr(v) if isinstance(v, float) else str(v)


def parse_value(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}", key=key)
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "tuple":
            return tuple(int(s) for s in raw.split(",") if s.strip())
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r} expects {kind}, got {raw!r}", key=key) from None


def parse_assignments(lines, source="<config>") -> dict:
    values = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value, got {line!r}", key=line)
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, raw)
    return values


def load_config(path=None, overrides=(), echo_dir=None) -> RunConfig:
    """Resolve defaults, then ``path`` (may be None), then ``key=value`` overrides."""
    values = {}
    if path:
        with open(path) as fh:
            values.update(parse_assignments(fh.read().splitlines(), source=str(path)))
    values.update(parse_assignments(overrides, source="--set"))
    try:
        cfg = RunConfig(**values)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if echo_dir is not None:
        write_config(cfg, echo_dir)
    return cfg


def write_config(cfg: RunConfig, directory) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "config.txt")
    with open(path, "w") as fh:
        fh.write(cfg.to_text())
    return path
