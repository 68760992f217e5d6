"""Plain-text run configuration.

Format: one ``key = value`` per line, ``#`` comments, blank lines ignored.
An optional ``[ablate]`` section lists axis overrides as comma-separated
value lists; the pipeline grid-runs every combination. Every ablation axis
of the evaluation table (subpatch grid, selection on/off, persona on/off,
selection threshold, registration on/off) is a config delta, never a code
change.
"""

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError
from .radiomics import VIEW_ORDER
from .selection import TASKS

__all__ = ["RunConfig", "parse_config", "load_config", "config_hash"]

ABLATE_AXES = ("grid", "selection", "persona", "t_sel", "registration")


def _parse_bool(text: str):
    lowered = text.strip().lower()
    if lowered in ("on", "true", "1", "yes"):
        return True
    if lowered in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _parse_extents(text: str):
    parts = tuple(int(p) for p in text.lower().split("x"))
    if len(parts) != 3 or min(parts) < 1:
        raise ValueError(f"expected DxHxW, got {text!r}")
    return parts


def _parse_views(text: str):
    if text.strip().lower() == "all":
        return tuple(VIEW_ORDER)
    views = tuple(v.strip() for v in text.split(","))
    bad = [v for v in views if v not in VIEW_ORDER]
    if bad:
        raise ValueError(f"unknown views {bad}; choose from {VIEW_ORDER} or 'all'")
    return views


def _parse_tasks(text: str):
    tasks = tuple(t.strip() for t in text.split(","))
    bad = [t for t in tasks if t not in TASKS]
    if bad:
        raise ValueError(f"unknown tasks {bad}; choose from {TASKS}")
    return tasks


def _parse_int_list(text: str):
    return tuple(int(p) for p in text.split(","))


@dataclass
class RunConfig:
    data_dir: str = ""              # empty: generate phantoms
    phantom_train: int = 120
    phantom_val: int = 40
    phantom_test: int = 40
    extents: tuple = (32, 128, 128)

    grid: tuple = (2, 2, 2)
    views: tuple = tuple(VIEW_ORDER)
    registration: bool = False

    persona: bool = True
    diffusion_t: int = 200
    internal_extents: tuple = (16, 32, 32)
    persona_steps: int = 800
    persona_batch: int = 4
    persona_lr: float = 2e-3

    selection: bool = True
    t_sel: float = 0.4

    epochs: int = 120
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.1
    net_extents: tuple = (8, 8, 8)
    base_channels: int = 8

    tasks: tuple = TASKS
    seed: int = 0
    seeds: tuple = (0, 1, 2)
    out: str = "runs/default"

    ablate: dict = field(default_factory=dict)

    def replace(self, **overrides) -> "RunConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(overrides)
        data["ablate"] = dict(data["ablate"])
        return RunConfig(**data)


_PARSERS = {
    "data_dir": str,
    "phantom_train": int,
    "phantom_val": int,
    "phantom_test": int,
    "extents": _parse_extents,
    "grid": _parse_extents,
    "views": _parse_views,
    "registration": _parse_bool,
    "persona": _parse_bool,
    "diffusion_t": int,
    "internal_extents": _parse_extents,
    "persona_steps": int,
    "persona_batch": int,
    "persona_lr": float,
    "selection": _parse_bool,
    "t_sel": float,
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "weight_decay": float,
    "net_extents": _parse_extents,
    "base_channels": int,
    "tasks": _parse_tasks,
    "seed": int,
    "seeds": _parse_int_list,
    "out": str,
}


def parse_config(text: str) -> RunConfig:
    values: dict = {}
    ablate: dict = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section != "ablate":
                raise ConfigurationError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip().lower()
        value = value.strip()
        if section == "ablate":
            if key not in ABLATE_AXES:
                raise ConfigurationError(
                    f"line {lineno}: {key!r} is not an ablation axis; axes: {ABLATE_AXES}")
            try:
                ablate[key] = tuple(_PARSERS[key](v.strip()) for v in value.split(";"))
            except ValueError as exc:
                raise ConfigurationError(f"line {lineno}: {exc}") from None
            continue
        if key not in _PARSERS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigurationError(f"line {lineno}: {exc}") from None
    config = RunConfig(**values, ablate=ablate)
    _validate(config)
    return config


def _validate(config: RunConfig) -> None:
    if min(config.phantom_train, config.phantom_val, config.phantom_test) < 0:
        raise ConfigurationError("phantom split sizes must be >= 0")
    if not 0.0 <= config.t_sel <= 1.0:
        raise ConfigurationError("t_sel must be in [0, 1]")
    if config.diffusion_t < 2:
        raise ConfigurationError("diffusion_t must be >= 2")
    if config.epochs < 0 or config.persona_steps < 0:
        raise ConfigurationError("training step counts must be >= 0")
    if config.learning_rate <= 0 or config.persona_lr <= 0:
        raise ConfigurationError("learning rates must be positive")
    if config.weight_decay < 0:
        raise ConfigurationError("weight_decay must be >= 0")
    if not config.seeds:
        raise ConfigurationError("seeds must be nonempty")
    if not config.tasks:
        raise ConfigurationError("tasks must be nonempty")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def config_hash(config: RunConfig, keys=None) -> str:
    """Stable digest over the named config keys (all content keys when
    omitted; ``out`` and ``ablate`` never contribute)."""
    payload = {}
    for f in fields(config):
        if f.name in ("out", "ablate"):
            continue
        if keys is not None and f.name not in keys:
            continue
        payload[f.name] = getattr(config, f.name)
    encoded = json.dumps(payload, sort_keys=True, default=list).encode()
    return hashlib.sha256(encoded).hexdigest()[:12]
