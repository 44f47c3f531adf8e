"""Configuration: experiment files, CLI overrides, environment defaults, path checks."""

from __future__ import annotations

import json
import os
import tomllib
from pathlib import Path
from typing import Any

from dotenv import load_dotenv
from pydantic import ValidationError

from .models import ExperimentConfig

# Load .env from project root
load_dotenv()

# --- Constants ---

SCADA_FEATURES = [
    "wind_speed",
    "generator_speed",
    "active_power",
    "wind_direction",
    "wind_direction_avg_25s",
    "yaw_position",
    "yaw_speed",
    "pitch1_angle",
    "pitch2_angle",
    "pitch3_angle",
    "pitch1_speed",
    "pitch2_speed",
    "pitch3_speed",
    "pitch1_motor_temp",
    "pitch2_motor_temp",
    "pitch3_motor_temp",
    "acc_horizontal",
    "acc_vertical",
    "environment_temp",
    "nacelle_internal_temp",
    "pitch1_switch_temp",
    "pitch2_switch_temp",
    "pitch3_switch_temp",
    "pitch1_charger_dc_current",
    "pitch2_charger_dc_current",
    "pitch3_charger_dc_current",
]

HEALTH_CONDITIONS = [
    "normal",
    "slightly_worn",
    "low_fracture_risk",
    "high_fracture_risk",
    "complete_fracture",
]

LABEL_COLUMN_NAME = "label"
SUPPORTED_CONFIG_SUFFIXES = {".toml", ".json"}


class ConfigError(Exception):
    """Raised when configuration is invalid."""


def default_output_dir() -> Path:
    return Path(os.environ.get("HSMCFL_OUTPUT_DIR", "output"))


def default_log_level() -> str:
    return os.environ.get("HSMCFL_LOG_LEVEL", "INFO").upper()


def feature_names(feature_count: int) -> list[str]:
    """SCADA parameter names for the 26-column schema, generic names otherwise."""
    if feature_count == len(SCADA_FEATURES):
        return list(SCADA_FEATURES)
    return [f"f{j}" for j in range(feature_count)]


def class_names(class_count: int) -> list[str]:
    if class_count == len(HEALTH_CONDITIONS):
        return list(HEALTH_CONDITIONS)
    return [f"class_{c}" for c in range(class_count)]


def load_config(path: Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a TOML/JSON experiment file, apply overrides and validate.

    With no path, the defaults of every section are used.
    """
    raw: dict[str, Any] = {}
    if path is not None:
        resolved = validate_path(path)
        if resolved.suffix.lower() not in SUPPORTED_CONFIG_SUFFIXES:
            raise ConfigError(
                f"Unsupported config format {resolved.suffix!r}; "
                f"use one of {sorted(SUPPORTED_CONFIG_SUFFIXES)}"
            )
        try:
            text = resolved.read_text(encoding="utf-8")
            raw = tomllib.loads(text) if resolved.suffix.lower() == ".toml" else json.loads(text)
        except (OSError, tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"Cannot read config {resolved}: {exc}") from exc

    raw = apply_overrides(raw, parse_overrides(overrides or []))

    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        problems = [
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}"
            for err in exc.errors()
        ]
        raise ConfigError("Config errors:\n  - " + "\n  - ".join(problems)) from exc


def parse_overrides(items: list[str]) -> list[tuple[str, Any]]:
    """Parse ``key=value`` items; one item may hold several comma-separated assignments."""
    parsed: list[tuple[str, Any]] = []
    for item in items:
        for assignment in _split_assignments(item):
            key, sep, value = assignment.partition("=")
            key = key.strip()
            if not sep or not key:
                raise ConfigError(f"Override must look like key=value, got {assignment!r}")
            parsed.append((key, _parse_value(value.strip())))
    return parsed


def apply_overrides(raw: dict[str, Any], overrides: list[tuple[str, Any]]) -> dict[str, Any]:
    """Return a copy of ``raw`` with dotted-key overrides applied.

    Keys whose first segment is not a top-level section resolve inside ``train``.
    """
    result = json.loads(json.dumps(raw, default=str))
    sections = set(ExperimentConfig.model_fields)
    for key, value in overrides:
        parts = key.split(".")
        if parts[0] not in sections:
            parts = ["train", *parts]
        node = result
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Override {key!r} descends into non-table value {part!r}")
            node = child
        node[parts[-1]] = value
    return result


def _split_assignments(item: str) -> list[str]:
    # Commas inside brackets belong to list values.
    pieces, depth, current = [], 0, []
    for ch in item:
        if ch in "[{":
            depth += 1
        elif ch in "]}":
            depth -= 1
        if ch == "," and depth == 0:
            pieces.append("".join(current))
            current = []
        else:
            current.append(ch)
    pieces.append("".join(current))
    return [p for p in (piece.strip() for piece in pieces) if p]


def _parse_value(text: str) -> Any:
    lowered = text.lower()
    if lowered in {"true", "false"}:
        return lowered == "true"
    if lowered in {"null", "none"}:
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def validate_path(path: Path, must_exist: bool = True) -> Path:
    """Validate a path is safe (no traversal) and optionally exists.

    Returns the resolved path.
    """
    if ".." in path.parts:
        raise ConfigError(f"Path traversal not allowed: {path}")

    resolved = path.resolve()
    if must_exist and not resolved.exists():
        raise ConfigError(f"Path does not exist: {resolved}")

    return resolved
