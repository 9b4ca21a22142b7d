"""Helpers for building config dataclasses from parsed JSON sections."""
import dataclasses
import hashlib
import json
from typing import Any, TypeVar

from errors import ConfigError

T = TypeVar("T")


def from_section(cls: type[T], data: dict[str, Any] | None, section: str) -> T:
    """Instantiate `cls` from a mapping, rejecting keys it does not declare."""
    data = data or {}
    known = {f.name for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {unknown}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"invalid section {section!r}: {e}") from e


def require(condition: bool, message: str):
    if not condition:
        raise ConfigError(message)


def require_choice(value: str, choices: tuple[str, ...], name: str):
    if value not in choices:
        raise ConfigError(f"{name} must be one of {list(choices)}, got {value!r}")


def config_digest(data: dict[str, Any]) -> str:
    """Short stable hash of a JSON-serializable config mapping."""
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]
