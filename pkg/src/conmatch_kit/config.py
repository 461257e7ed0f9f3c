"""Run configuration as flat ``key = value`` text with dotted keys.

Values are JSON literals (numbers, booleans, lists, quoted strings); a bare
word that is not valid JSON is read as a string. Nothing is executed.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .trainer import ConfigError, TrainConfig

# TrainConfig.seed is driven by RunConfig.seeds, one run per fold
_HIDDEN = {"seed"}


@dataclass
class DatasetConfig:
    source: str = "synthetic"  # synthetic | manifest
    manifest: str = ""
    test_manifest: str = ""
    n_classes: int = 4
    n_per_class: int = 500
    n_test_per_class: int = 250
    input_dim: int = 16
    class_separation: float = 4.0
    noise_sigma: float = 1.0
    seed: int = 123
    labels_per_class: int = 4
    include_labeled_in_unlabeled: bool = True


@dataclass
class SweepConfig:
    """Default axis for ``sweep`` when the command line does not name one."""

    axis: str = ""
    values: list = field(default_factory=list)


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    out: str = "runs/default"
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def validate(self, base_dir: Path | None = None) -> None:
        self.train.validate()
        d = self.dataset
        if d.source not in ("synthetic", "manifest"):
            raise ConfigError("dataset.source", "must be 'synthetic' or 'manifest'")
        if d.source == "manifest":
            for key in ("manifest", "test_manifest"):
                path = getattr(d, key)
                if key == "test_manifest" and not path:
                    continue
                resolved = resolve_path(path, base_dir)
                if not path or not resolved.exists():
                    raise ConfigError(f"dataset.{key}", f"file not found: {path!r}")
        else:
            for key in ("n_classes", "n_per_class", "input_dim", "n_test_per_class"):
                if getattr(d, key) < 1:
                    raise ConfigError(f"dataset.{key}", "must be a positive integer")
            if d.class_separation <= 0:
                raise ConfigError("dataset.class_separation", "must be positive")
        if d.labels_per_class < 1:
            raise ConfigError("dataset.labels_per_class", "must be a positive integer")
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds", "must be a non-empty list of non-negative integers")


def resolve_path(path: str, base_dir: Path | None) -> Path:
    p = Path(path)
    if not p.is_absolute() and base_dir is not None and not p.exists():
        return base_dir / p
    return p


def _flatten(obj, prefix: str = "") -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        if prefix == "" and isinstance(obj, TrainConfig) and f.name in _HIDDEN:
            continue
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(_flatten(value, key + "."))
        else:
            out[key] = value
    return out


def to_flat(config: RunConfig) -> dict[str, Any]:
    flat = _flatten(config.train)
    flat.update(_flatten(config.dataset, "dataset."))
    flat["out"] = config.out
    flat["seeds"] = list(config.seeds)
    flat.update(_flatten(config.sweep, "sweep."))
    return flat


def _coerce(key: str, value: Any, current: Any) -> Any:
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return value
    if isinstance(current, str):
        if not isinstance(value, str):
            return json.dumps(value) if not isinstance(value, (int, float)) else str(value)
        return value
    return value


def set_key(config: RunConfig, key: str, value: Any) -> None:
    """Assign one dotted key, validating it names a field and coercing the type."""
    parts = key.split(".")
    if parts[0] == "dataset":
        target, path = config.dataset, parts[1:]
    elif parts[0] == "sweep":
        target, path = config.sweep, parts[1:]
    elif parts[0] in ("out", "seeds") and len(parts) == 1:
        target, path = config, parts
    else:
        target, path = config.train, parts
    if not path or (target is config.train and path[0] in _HIDDEN):
        raise ConfigError(key, "unknown configuration key")
    for name in path[:-1]:
        child = getattr(target, name, None)
        if not dataclasses.is_dataclass(child):
            raise ConfigError(key, "unknown configuration key")
        target = child
    leaf = path[-1]
    names = {f.name for f in dataclasses.fields(target)}
    if leaf not in names or dataclasses.is_dataclass(getattr(target, leaf)):
        raise ConfigError(key, "unknown configuration key")
    setattr(target, leaf, _coerce(key, value, getattr(target, leaf)))


def parse_value(text: str) -> Any:
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def format_value(value: Any) -> str:
    if isinstance(value, str):
        # bare words stay bare unless they would read back as another type
        return value if value and parse_value(value) == value and value.strip() == value else json.dumps(value)
    return json.dumps(value)


def parse_text(text: str, source: str = "<config>") -> RunConfig:
    config = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}", f"{source}: expected 'key = value', got {raw!r}")
        set_key(config, key.strip(), parse_value(value))
    return config


def serialize(config: RunConfig) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in to_flat(config).items())


def load_config(path: str | Path, validate: bool = True) -> RunConfig:
    path = Path(path)
    config = parse_text(path.read_text(), str(path))
    if validate:
        config.validate(path.parent)
    return config


def fold_config(config: RunConfig, seed: int) -> TrainConfig:
    train = dataclasses.replace(config.train, seed=seed)
    return train
