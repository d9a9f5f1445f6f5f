"""``key = value`` config files with dotted ``model.*`` / ``train.*`` keys.

Every key has a default; the defaults are the published configuration
(three views of 2x8x8, 4x8x8 and 8x8x8 tubelets over 32x112x112 clips,
d=512, 3-layer/3-head view encoders, 1-layer/5-head global encoder,
AdamW at 1e-4 with weight decay 1e-5 for 100 epochs).
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigError
from .model import DEFAULT_LABELS, ModelConfig
from .training import TrainConfig

_SECTIONS = {"model": ModelConfig, "train": TrainConfig}


def _parse_views(text: str) -> tuple[tuple[int, int, int], ...]:
    views = []
    for item in text.split(","):
        parts = item.strip().lower().split("x")
        if len(parts) != 3:
            raise ConfigError(f"bad tubelet {item!r}; expected TxHxW")
        try:
            views.append(tuple(int(p) for p in parts))
        except ValueError:
            raise ConfigError(f"bad tubelet {item!r}; expected TxHxW") from None
    return tuple(views)


def _convert(section: str, name: str, raw: str):
    if section == "model" and name == "views":
        return _parse_views(raw)
    if section == "model" and name == "labels":
        return tuple(s.strip() for s in raw.split(","))
    if section == "model" and name == "fusion_layers":
        return raw.strip()
    default = getattr(_SECTIONS[section](), name)
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{section}.{name}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def _format(value) -> str:
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ",".join("x".join(map(str, v)) for v in value)
    if isinstance(value, tuple):
        return ",".join(value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str) -> tuple[ModelConfig, TrainConfig]:
    values: dict[str, dict] = {"model": {}, "train": {}}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in _SECTIONS or name not in {f.name for f in dataclasses.fields(_SECTIONS[section])}:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[section][name] = _convert(section, name, raw)
    model = values["model"]
    if "classes" in model and "labels" not in model and model["classes"] != len(DEFAULT_LABELS):
        model["labels"] = tuple(f"class{c}" for c in range(model["classes"]))
    try:
        return ModelConfig(**model), TrainConfig(**values["train"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None) -> tuple[ModelConfig, TrainConfig]:
    if path is None:
        return ModelConfig(), TrainConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def format_config(model: ModelConfig, train: TrainConfig) -> str:
    lines = []
    for section, obj in (("model", model), ("train", train)):
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
