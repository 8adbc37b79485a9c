"""Plain-text ``key=value`` run configuration.

One assignment per line; ``#`` starts a comment; blank lines are ignored.
Keys may carry a section prefix (``train.``, ``model.``, ``distill.``) or be
bare when the name is unambiguous across sections. ``model.preset`` picks a
base architecture before the other model keys apply.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .distill import DistillConfig
from .model import PRESETS, ConfigError, ModelConfig
from .train import TrainConfig

SECTIONS = {"train": TrainConfig, "model": ModelConfig, "distill": DistillConfig}


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_kv_file(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_kv(text, str(path))


def valid_keys() -> list[str]:
    keys = ["model.preset"]
    for sec, cls in SECTIONS.items():
        keys += [f"{sec}.{f.name}" for f in fields(cls)]
    return sorted(keys)


def _qualify(key: str) -> str:
    if key in valid_keys():
        return key
    owners = [sec for sec, cls in SECTIONS.items() if key in {f.name for f in fields(cls)}]
    if key == "preset":
        owners = ["model"]
    if len(owners) == 1:
        return f"{owners[0]}.{key}"
    if len(owners) > 1:
        raise ConfigError(f"ambiguous key {key!r}; prefix it with one of {owners}")
    raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}")


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    model: ModelConfig
    distill: DistillConfig


def build_run_config(kv: dict[str, str], model_base: ModelConfig | None = None) -> RunConfig:
    """Turn raw key/value pairs into validated configs (unknown keys are errors)."""
    by_sec: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    for key, value in kv.items():
        sec, name = _qualify(key).split(".", 1)
        by_sec[sec][name] = value
    preset = by_sec["model"].pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        model_base = PRESETS[preset]
    base = model_base or PRESETS["toy-student"]
    model = ModelConfig.from_dict({**base.to_dict(), **by_sec["model"]}) if by_sec["model"] else base
    return RunConfig(TrainConfig.from_dict(by_sec["train"]), model, DistillConfig.from_dict(by_sec["distill"]))


def override(cfg, **changes):
    """``dataclasses.replace`` that skips None values."""
    changes = {k: v for k, v in changes.items() if v is not None}
    return replace(cfg, **changes) if changes else cfg
