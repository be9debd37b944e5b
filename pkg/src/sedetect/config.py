"""Run configuration: a ``key = value`` text document with flag overrides.

Lines starting with ``#`` are comments. Lists are comma separated. A
``preset`` key (``desk`` or ``reference``) selects the starting values;
every other key overrides a single field.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import DESK_CONFIG, PRESETS, ModelConfig
from .training import TrainConfig

TRAIN_PRESETS = {
    "desk": TrainConfig(epochs=20, batch_size=32, folds=3, learning_rate=1e-3),
    "reference": TrainConfig(),
}

_MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
_OTHER_KEYS = {"preset", "arch"}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = DESK_CONFIG
    train: TrainConfig = TRAIN_PRESETS["desk"]
    arch: str = "se"
    preset: str = "desk"

    def model_config(self) -> ModelConfig:
        return self.model.without_se() if self.arch == "baseline" else self.model


def parse_kv_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def _convert(key: str, value: str, kind):
    kind = str(kind)
    try:
        if "tuple" in kind:
            return tuple(int(v) for v in value.split(",") if v.strip())
        if kind == "bool":
            lowered = value.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return lowered in ("true", "1", "yes")
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None


def build_run_config(values: dict[str, str] | None = None, **overrides) -> RunConfig:
    """Merge file values with flag overrides (flags win) and validate."""
    merged = dict(values or {})
    merged.update({k: str(v) if not isinstance(v, (tuple, list)) else ",".join(map(str, v))
                   for k, v in overrides.items() if v is not None})
    unknown = set(merged) - set(_MODEL_KEYS) - set(_TRAIN_KEYS) - _OTHER_KEYS
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
    preset = merged.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"preset: expected one of {sorted(PRESETS)}, got {preset!r}")
    arch = merged.pop("arch", "se")
    if arch not in ("se", "baseline"):
        raise ConfigError(f"arch: expected 'se' or 'baseline', got {arch!r}")
    model_kw = {k: _convert(k, v, _MODEL_KEYS[k]) for k, v in merged.items() if k in _MODEL_KEYS}
    train_kw = {k: _convert(k, v, _TRAIN_KEYS[k]) for k, v in merged.items() if k in _TRAIN_KEYS}
    model = replace(PRESETS[preset], **model_kw).validate()
    train = replace(TRAIN_PRESETS[preset], **train_kw).validate()
    return RunConfig(model, train, arch, preset)


def load_run_config(path=None, **overrides) -> RunConfig:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        values = parse_kv_text(p.read_text(encoding="utf-8"))
    return build_run_config(values, **overrides)
