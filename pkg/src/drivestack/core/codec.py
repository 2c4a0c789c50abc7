"""Canonical JSON form of the core records.

Dataclasses map to objects with their snake_case field names, enums to their
values, tuples to arrays and provenance masks to sorted flag lists. Decoding
is driven by type hints and rejects unknown fields.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import math
import types
import typing
from functools import lru_cache
from typing import Any, Union

import numpy as np

from .errors import CodecError
from .geometry import Pose2D
from .provenance import ProvenanceMask, Source


def encode(obj: Any) -> Any:
    if isinstance(obj, enum.Enum):
        return obj.value
    if obj is None or isinstance(obj, (bool, str)):
        return obj
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if not math.isfinite(f):
            return None if math.isnan(f) else ("inf" if f > 0 else "-inf")
        return f
    if isinstance(obj, ProvenanceMask):
        return obj.names()
    if isinstance(obj, Pose2D):
        return {"x": obj.x, "y": obj.y, "heading": obj.heading}
    if dataclasses.is_dataclass(obj):
        return {f.name: encode(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {_key(k): encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [encode(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(encode(v) for v in obj)
    if isinstance(obj, np.ndarray):
        return encode(obj.tolist())
    raise TypeError(f"cannot encode {type(obj).__name__}")


def _key(k: Any) -> str:
    if isinstance(k, enum.Enum):
        return k.value
    return str(k)


def dumps(obj: Any) -> str:
    """Canonical text: sorted keys, compact separators."""
    return json.dumps(encode(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def loads(cls: Any, text: str) -> Any:
    return decode(cls, json.loads(text))


@lru_cache(maxsize=None)
def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def decode(tp: Any, data: Any, path: str = "") -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    if tp is Any:
        return data
    if origin in (Union, types.UnionType):
        if data is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return decode(a, data, path)
            except (CodecError, ValueError, TypeError) as exc:
                errors.append(str(exc))
        raise CodecError(path, "no union member matched: " + "; ".join(errors))
    if tp is ProvenanceMask:
        if not isinstance(data, list):
            raise CodecError(path, "expected list of provenance flags")
        try:
            return ProvenanceMask(frozenset(Source(v) for v in data))
        except ValueError as exc:
            raise CodecError(path, str(exc)) from None
    if tp is Pose2D:
        return _decode_dataclass(Pose2D, data, path)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(data)
        except ValueError:
            raise CodecError(path, f"{data!r} is not a valid {tp.__name__}") from None
    if tp is bool:
        if not isinstance(data, bool):
            raise CodecError(path, f"expected bool, got {type(data).__name__}")
        return data
    if tp is int:
        if isinstance(data, bool) or not isinstance(data, int):
            raise CodecError(path, f"expected int, got {type(data).__name__}")
        return data
    if tp is float:
        if isinstance(data, str) and data in ("inf", "-inf"):
            return float(data)
        if isinstance(data, bool) or not isinstance(data, (int, float)):
            raise CodecError(path, f"expected number, got {type(data).__name__}")
        return float(data)
    if tp is str:
        if not isinstance(data, str):
            raise CodecError(path, f"expected string, got {type(data).__name__}")
        return data
    if origin is tuple:
        if not isinstance(data, list):
            raise CodecError(path, "expected array")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(decode(args[0], v, f"{path}[{i}]") for i, v in enumerate(data))
        if len(data) != len(args):
            raise CodecError(path, f"expected {len(args)} items, got {len(data)}")
        return tuple(decode(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, data)))
    if origin is list:
        if not isinstance(data, list):
            raise CodecError(path, "expected array")
        return [decode(args[0], v, f"{path}[{i}]") for i, v in enumerate(data)]
    if origin is dict:
        if not isinstance(data, dict):
            raise CodecError(path, "expected object")
        kt, vt = args
        return {decode(kt, _dict_key(kt, k), f"{path}.{k}"): decode(vt, v, f"{path}.{k}") for k, v in data.items()}
    if dataclasses.is_dataclass(tp):
        return _decode_dataclass(tp, data, path)
    raise CodecError(path, f"unsupported type {tp!r}")


def _dict_key(kt, k: str):
    if kt is int:
        try:
            return int(k)
        except ValueError:
            return k
    return k


def _decode_dataclass(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise CodecError(path, f"expected object for {cls.__name__}")
    hints = _hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise CodecError(path, f"unknown field(s) {unknown} for {cls.__name__}")
    kwargs = {}
    for name, f in fields.items():
        sub = f"{path}.{name}" if path else name
        if name in data:
            kwargs[name] = decode(hints[name], data[name], sub)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise CodecError(sub, "missing required field")
    try:
        return cls(**kwargs)
    except CodecError:
        raise
    except Exception as exc:  # contract checks in __post_init__
        raise CodecError(path, f"{cls.__name__}: {exc}") from None
