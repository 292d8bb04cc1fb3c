"""
Configuration Module
====================
Process settings loaded from environment variables and .env file, plus the
key=value pipeline config file with environment overrides.

Uses python-dotenv for local development and standard os.environ for production.

Config file format (UTF-8)::

    # comment
    train.epochs_base = 30
    paste.scale_range = 0.9, 1.1

Every key can be overridden by ``DACIL_<SECTION>_<KEY>``. Precedence:
dataclass defaults < config file < environment < explicit CLI flags.
"""

import dataclasses
import logging
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from dotenv import load_dotenv

from .errors import InvalidConfigError

# Load .env file (no-op if not present)
load_dotenv()

logger = logging.getLogger(__name__)

ENV_PREFIX = "DACIL_"
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class Settings:
    """Immutable process settings resolved from environment variables.

    Attributes:
        otel_endpoint: OTLP gRPC endpoint for telemetry export; empty disables export.
        otel_service_name: Service name tag for telemetry spans.
        log_level: Root logging level name.
        out_dir: Default directory for run artifacts.
        env_prefix: Prefix of pipeline config overrides.
    """

    otel_endpoint: str = field(
        default_factory=lambda: os.getenv(
            "OTEL_EXPORTER_OTLP_TRACES_ENDPOINT",
            os.getenv("OTEL_EXPORTER_OTLP_ENDPOINT", ""),
        )
    )
    otel_service_name: str = field(
        default_factory=lambda: os.getenv("OTEL_SERVICE_NAME", "dacil-workbench")
    )
    log_level: str = field(
        default_factory=lambda: os.getenv("DACIL_LOG_LEVEL", "INFO").upper()
    )
    out_dir: str = field(
        default_factory=lambda: os.getenv("DACIL_OUT_DIR", "runs")
    )
    env_prefix: str = ENV_PREFIX


def get_settings() -> Settings:
    """Create and return a Settings instance from current environment."""
    return Settings()


# ──────────────────────────────────────────────────────────────
# Pipeline config file
# ──────────────────────────────────────────────────────────────

def parse_config_text(text: str) -> dict[str, dict[str, str]]:
    """Parse ``section.key = value`` lines into raw strings per section."""
    values: dict[str, dict[str, str]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        lhs, rhs = (part.strip() for part in line.split("=", 1))
        section, dot, key = lhs.partition(".")
        if not dot or not section or not key:
            raise InvalidConfigError(f"line {lineno}: key {lhs!r} must look like 'section.key'")
        values.setdefault(section, {})[key] = rhs
    return values


def read_config_file(path: str | Path | None) -> dict[str, dict[str, str]]:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise InvalidConfigError(f"cannot read config file {path}: {e}") from e
    return parse_config_text(text)


def coerce_value(raw: str, hint: Any) -> Any:
    """Convert a raw string to the declared field type.

    Supports int, float, bool, str, optional types and tuples written as
    comma-separated lists.
    """
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        options = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.strip().lower() in ("", "none"):
            return None
        return coerce_value(raw, options[0])
    if origin is tuple:
        args = typing.get_args(hint)
        items = [item.strip() for item in raw.split(",") if item.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(coerce_value(item, args[0]) for item in items)
        if len(items) != len(args):
            raise InvalidConfigError(f"expected {len(args)} comma-separated values, got {raw!r}")
        return tuple(coerce_value(item, a) for item, a in zip(items, args))
    try:
        if hint is bool:
            lowered = raw.strip().lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
    except ValueError as e:
        raise InvalidConfigError(str(e)) from e
    raise InvalidConfigError(f"field type {hint!r} cannot be set from a config file")


def resolve_section(
    cls: type,
    section: str,
    file_values: Mapping[str, str] | None = None,
    environ: Mapping[str, str] | None = None,
    prefix: str = ENV_PREFIX,
) -> Any:
    """Build a config dataclass from defaults, file values and environment.

    Raises:
        InvalidConfigError: Unknown key, uncoercible value or failed validation.
    """
    file_values = dict(file_values or {})
    environ = os.environ if environ is None else environ
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.init]
    unknown = sorted(set(file_values) - set(names))
    if unknown:
        raise InvalidConfigError(f"unknown keys in section '{section}': {', '.join(unknown)}")

    kwargs: dict[str, Any] = {}
    for name in names:
        env_key = f"{prefix}{section.upper()}_{name.upper()}"
        if env_key in environ:
            kwargs[name] = coerce_value(environ[env_key], hints[name])
            logger.debug("Config %s.%s taken from %s", section, name, env_key)
        elif name in file_values:
            kwargs[name] = coerce_value(file_values[name], hints[name])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, InvalidConfigError):
            raise
        raise InvalidConfigError(f"section '{section}': {e}") from e


def check_sections(values: Mapping[str, Any], known: typing.Iterable[str]) -> None:
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise InvalidConfigError(f"unknown config sections: {', '.join(unknown)}")
