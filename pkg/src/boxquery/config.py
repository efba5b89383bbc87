"""Flat key = value configuration files, with command-line overrides.

Lines are `key = value`; `#` starts a comment; blank lines are ignored.
Flags always win over file values, and every command prints the resolved
configuration before running.
"""

from __future__ import annotations

from pathlib import Path

from .model import ModelConfig

_MODEL_KEYS = {
    "dim": int,
    "alpha": float,
    "gamma": float,
    "negatives": int,
    "intersection_mode": str,
    "offset_mode": str,
    "geometry": str,
    "learning_rate": float,
    "epochs": int,
    "batch_per_structure": int,
    "seed": int,
    "dtype": str,
    "train_structures": lambda s: tuple(x.strip() for x in s.split(",") if x.strip()),
}


def parse_config_file(path: str | Path) -> dict:
    values: dict = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _MODEL_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _MODEL_KEYS[key](value)
    return values


def build_model_config(file_path: str | None, overrides: dict) -> ModelConfig:
    """File values first, then non-None overrides on top of the defaults."""
    values: dict = {}
    if file_path:
        values.update(parse_config_file(file_path))
    for key, value in overrides.items():
        if value is not None:
            caster = _MODEL_KEYS[key]
            values[key] = caster(value) if isinstance(value, str) else value
    return ModelConfig(**values)


def format_config(config: ModelConfig) -> str:
    d = config.to_dict()
    d["train_structures"] = ",".join(d["train_structures"])
    return "\n".join(f"{k} = {d[k]}" for k in sorted(d))
