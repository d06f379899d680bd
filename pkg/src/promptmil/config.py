"""JSON config files merged with command-line overrides."""

from __future__ import annotations

import dataclasses
import json
import re
import types
import typing
from pathlib import Path
from typing import Any

from .errors import InvalidConfig, IoFailure, ParseError
from .synth import SynthConfig
from .trainer import TrainConfig


def _locate(text: str, key: str) -> str:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    if not m:
        return ""
    line = text.count("\n", 0, m.start()) + 1
    col = m.start() - (text.rfind("\n", 0, m.start()) + 1) + 1
    return f"{line}:{col}: "


def _coerce(value: Any, hint, key: str) -> Any:
    """Check/convert value against a type hint; raise ValueError on mismatch."""
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        opts = typing.get_args(hint)
        if value is None and type(None) in opts:
            return None
        for opt in opts:
            if opt is type(None):
                continue
            try:
                return _coerce(value, opt, key)
            except ValueError:
                pass
        raise ValueError(f"expected {hint}, got {value!r}")
    if hint is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ValueError(f"expected a boolean, got {value!r}")
    if hint is int:
        if isinstance(value, bool):
            raise ValueError(f"expected an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise ValueError(f"expected an integer, got {value!r}")
    if hint is float:
        if isinstance(value, bool):
            raise ValueError(f"expected a number, got {value!r}")
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        raise ValueError(f"expected a number, got {value!r}")
    if hint is str:
        if isinstance(value, str):
            return value
        raise ValueError(f"expected a string, got {value!r}")
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ValueError(f"expected an object, got {value!r}")
        return _coerce_fields(hint, value, key + ".")
    raise ValueError(f"unsupported field type {hint}")


def _coerce_fields(cls, doc: dict, prefix: str = "") -> dict:
    hints = typing.get_type_hints(cls)
    out = {}
    for k, v in doc.items():
        if k not in hints:
            raise KeyError(prefix + k)
        try:
            out[k] = _coerce(v, hints[k], prefix + k)
        except _KeyedError:
            raise
        except ValueError as exc:
            raise _KeyedError(prefix + k, str(exc)) from None
    return out


class _KeyedError(ValueError):
    def __init__(self, key, msg):
        super().__init__(msg)
        self.key = key


def _set_dotted(doc: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ParseError(f"override {dotted!r}: {p!r} is not an object")
    node[parts[-1]] = value


def load_config(path, overrides: dict[str, Any] | None = None, kind: str = "train"):
    """Read a JSON config (missing or empty file -> defaults) and apply overrides.

    Override keys may be dotted (``ablation.kmeans_grouping``); ``None`` values
    are ignored so unset CLI flags do not clobber the file.
    """
    cls = {"train": TrainConfig, "synth": SynthConfig}.get(kind)
    if cls is None:
        raise InvalidConfig(f"unknown config kind {kind!r}")
    text, where = "", "<overrides>"
    doc: dict = {}
    if path is not None:
        where = str(path)
        try:
            text = Path(path).read_text()
        except FileNotFoundError:
            raise IoFailure(f"{path}: no such file") from None
        except OSError as exc:
            raise IoFailure(f"{path}: {exc}") from None
        if text.strip():
            try:
                doc = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
            if not isinstance(doc, dict):
                raise ParseError(f"{path}:1:1: config must be a JSON object")

    try:
        from_file = _coerce_fields(cls, doc)
    except KeyError as exc:
        key = exc.args[0]
        raise ParseError(f"{where}:{_locate(text, key.split('.')[-1])}unknown key {key!r}") from None
    except _KeyedError as exc:
        raise ParseError(f"{where}:{_locate(text, exc.key.split('.')[-1])}key {exc.key!r}: {exc}") from None

    merged = dict(from_file)
    if overrides:
        for key, value in overrides.items():
            if value is None:
                continue
            _set_dotted(merged, key, value)
        try:
            merged = _coerce_fields(cls, _plain(merged))
        except KeyError as exc:
            raise ParseError(f"override: unknown key {exc.args[0]!r}") from None
        except _KeyedError as exc:
            raise ParseError(f"override: key {exc.key!r}: {exc}") from None
    merged = _plain(merged)
    return cls.from_dict(merged)


def _plain(doc: dict) -> dict:
    return {k: dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v for k, v in doc.items()}


def save_config(config, path) -> None:
    Path(path).write_text(json.dumps(dataclasses.asdict(config), indent=1))
