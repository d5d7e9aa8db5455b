from __future__ import annotations

import inspect
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type

from src.core.errors import ConfigError


# ===== Command registry =====
class CommandRegistry:
    _commands: Dict[str, Type["BaseCommand"]] = {}

    @classmethod
    def register(cls, command_cls: Type["BaseCommand"]) -> None:
        slug = command_cls.slug
        if not slug:
            raise ValueError("Command must define non-empty slug")
        if slug in cls._commands:
            raise ValueError(f"Command slug '{slug}' already registered")
        cls._commands[slug] = command_cls

    @classmethod
    def get(cls, slug: str) -> Type["BaseCommand"]:
        try:
            return cls._commands[slug]
        except KeyError:
            raise ConfigError(f"Unknown command: {slug}")

    @classmethod
    def all(cls) -> Dict[str, Type["BaseCommand"]]:
        return dict(cls._commands)


def register_command(command_cls: Type["BaseCommand"]) -> Type["BaseCommand"]:
    CommandRegistry.register(command_cls)
    return command_cls


# ===== Config layering =====
def flatten_config(document: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """{"model": {"filters": 8}} -> {"model.filters": 8}"""
    flat: Dict[str, Any] = {}
    for key, value in document.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_config(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def load_config_file(path: Path) -> Dict[str, Any]:
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(document, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return flatten_config(document)


def parse_overrides(items: Sequence[str]) -> Dict[str, Any]:
    """`key=value` pairs; values are JSON when they parse, strings otherwise."""
    overrides: Dict[str, Any] = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value, got {item!r}")
        try:
            overrides[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key.strip()] = raw
    return overrides


# ===== Command base =====
@dataclass
class RunContext:
    out_dir: Path
    verbose: bool = False


class BaseCommand:
    slug: str = ""
    title: str = ""
    # accepted keys -> kind understood by _serialize_params
    param_kinds: Dict[str, str] = {}
    # extra CLI flags: flag -> (param key, help)
    flags: Dict[str, Tuple[str, str]] = {}

    def __init__(self, params: Optional[Dict[str, Any]] = None):
        self.params = self._serialize_params(params or {})

    def _serialize_params(self, raw_params: Dict[str, Any]) -> Dict[str, Any]:
        """Normalize raw config values to typed Python objects; unknown keys are rejected."""
        serialized = {}
        for key, value in raw_params.items():
            kind = self.param_kinds.get(key)
            if kind is None:
                raise ConfigError(f"Unknown parameter: {key}")
            if value is None:
                serialized[key] = None
            else:
                serialized[key] = getattr(self, f"_serialize_{kind}")(key, value)
        return serialized

    def _serialize_int(self, key: str, value: Any) -> int:
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        try:
            number = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        if not number.is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(number)

    def _serialize_float(self, key: str, value: Any) -> float:
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}")

    def _serialize_string(self, key: str, value: Any) -> str:
        return str(value)

    def _serialize_path(self, key: str, value: Any) -> Path:
        if not isinstance(value, (str, Path)) or not str(value):
            raise ConfigError(f"{key}: expected a path, got {value!r}")
        return Path(value)

    def _serialize_bool(self, key: str, value: Any) -> bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {value!r}")

    def _sequence(self, key: str, value: Any) -> List[Any]:
        if isinstance(value, str):
            value = [part for part in value.split(",") if part.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)

    def _serialize_range(self, key: str, value: Any) -> Tuple[float, float]:
        items = self._sequence(key, value)
        if len(items) != 2:
            raise ConfigError(f"{key}: expected [low, high], got {value!r}")
        return self._serialize_float(key, items[0]), self._serialize_float(key, items[1])

    def _serialize_int_range(self, key: str, value: Any) -> Tuple[int, int]:
        items = self._sequence(key, value)
        if len(items) != 2:
            raise ConfigError(f"{key}: expected [low, high], got {value!r}")
        return self._serialize_int(key, items[0]), self._serialize_int(key, items[1])

    def _serialize_int_list(self, key: str, value: Any) -> Tuple[int, ...]:
        return tuple(self._serialize_int(key, v) for v in self._sequence(key, value))

    def _serialize_pairs(self, key: str, value: Any) -> Tuple[Tuple[int, int], ...]:
        pairs = []
        for item in self._sequence(key, value):
            if not isinstance(item, (list, tuple)) or len(item) != 2:
                raise ConfigError(f"{key}: expected a list of [a, b] pairs, got {value!r}")
            pairs.append((self._serialize_int(key, item[0]), self._serialize_int(key, item[1])))
        return tuple(pairs)

    def param(self, key: str, default: Any = None) -> Any:
        value = self.params.get(key)
        return default if value is None else value

    def section(self, prefix: str) -> Dict[str, Any]:
        """Set parameters under `prefix.` with the prefix stripped."""
        head = f"{prefix}."
        return {k[len(head):]: v for k, v in self.params.items() if k.startswith(head) and v is not None}

    def run(self, ctx: RunContext) -> int:
        """Execute the command and return the process exit code."""
        raise NotImplementedError

    @classmethod
    def doc_path(cls) -> Path:
        # markdown docs live alongside code: src/commands/commands/{slug}.md
        return Path(inspect.getfile(cls)).with_name(f"{cls.slug}.md")

    @classmethod
    def explain(cls) -> str:
        return cls.doc_path().read_text(encoding="utf-8")
