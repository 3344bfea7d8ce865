"""
Schema module for the Wav2DF toolkit
Converts the frozen config dataclasses to and from plain YAML-ready values
"""

import dataclasses
import typing
from enum import Enum
from fractions import Fraction
from typing import Any, Dict, Type, TypeVar

from errors import ConfigError, Wav2DFError

T = TypeVar("T")


def to_plain(value: Any) -> Any:
    """Dataclasses become dicts, tuples lists, fractions 'n/d' strings, enums their values."""
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: to_plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, Fraction):
        return f"{value.numerator}/{value.denominator}"
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (tuple, list)):
        return [to_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: to_plain(v) for k, v in value.items()}
    return value


def _allows_none(hint) -> bool:
    return type(None) in getattr(hint, "__args__", ())


def _coerce(section: str, name: str, value: Any, default: Any, hint) -> Any:
    key = f"{section}.{name}" if section else name
    if value is None:
        if default is None or _allows_none(hint):
            return None
        raise ConfigError(f"{key} must not be empty")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, Fraction):
        if isinstance(value, bool) or not isinstance(value, (str, int, float)):
            raise ConfigError(f"{key} must be a ratio such as '1/8', got {value!r}")
        try:
            return Fraction(str(value))
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"{key} must be a ratio such as '1/8', got {value!r}") from None
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        return tuple(float(v) if isinstance(v, int) and default and isinstance(default[0], float) else v for v in value)
    if isinstance(default, str):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return str(value)
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


def from_plain(cls: Type[T], data: Any, section: str = "", base: T = None) -> T:
    """
    Build a config dataclass from a plain mapping.

    Args:
        cls: Target dataclass
        data: Mapping from the YAML document (None means all defaults)
        section: Dotted prefix used in error messages
        base: Instance whose values replace the dataclass defaults

    Returns:
        An instance of cls
    """
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{section or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    unknown = sorted(set(data) - set(fields))
    if unknown:
        prefix = f"{section}." if section else ""
        raise ConfigError(f"unknown key '{prefix}{unknown[0]}'")

    values: Dict[str, Any] = {}
    for name, f in fields.items():
        if base is not None:
            default = getattr(base, name)
        elif f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        else:
            default = None
        if name in data:
            values[name] = _coerce(section, name, data[name], default, hints.get(name))
        elif base is not None:
            values[name] = default
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (Wav2DFError, TypeError) as e:
        raise ConfigError(f"{section or 'config'}: {e}") from None
