"""Configuration files and seeded random streams."""

import json
import zlib
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Type, TypeVar

import numpy as np
from pydantic import BaseModel, ValidationError

from .constants import SEED_STREAMS
from .errors import ConfigError

ModelT = TypeVar("ModelT", bound=BaseModel)


def _parse_scalar(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(target: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = target
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"config key '{key}' conflicts with scalar '{part}'")
        node = child
    node[parts[-1]] = value


def load_config_file(path: Path) -> Dict[str, Any]:
    """Read a JSON object or a flat ``key=value`` file (dotted keys nest)."""
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return data

    data: Dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number}: expected key=value, got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{number}: empty key")
        _set_dotted(data, key, _parse_scalar(value))
    return data


def _merge(base: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_config(
    model: Type[ModelT],
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ModelT:
    """Validate file values overlaid with non-None overrides into ``model``."""
    data = load_config_file(path) if path else {}
    data = _merge(data, overrides or {})
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid {model.__name__}: {exc}") from exc


def stream_seed(seed: int, name: str) -> np.random.SeedSequence:
    """Seed sequence for a named sub-stream of a run seed."""
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])


def make_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, name))


def seed_streams(seed: int) -> Dict[str, np.random.Generator]:
    """One generator per name in ``SEED_STREAMS``."""
    return {name: make_rng(seed, name) for name in SEED_STREAMS}
