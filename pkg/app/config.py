"""Key-value run configuration.

A run file holds ``SECTION__FIELD=value`` lines (read with python-dotenv) that
map onto the sections of :class:`app.schemas.RunConfig`. Lists are comma
separated and per-task maps are written ``t:h,h;t:h``.
"""
import logging
import os
from typing import Dict, Mapping, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, ValidationError

from app.exceptions import ConfigInvalid
from app.schemas import RunConfig
from app.workers import default_workers

logger = logging.getLogger(__name__)

OUT_ENV = "REHEARSAL_LAB_OUT"
LOG_LEVEL_ENV = "REHEARSAL_LAB_LOG_LEVEL"
RUN_CONFIG_FILE = "run_config.env"

SECTIONS = {
    name: RunConfig.model_fields[name].annotation
    for name in ("problem", "ground_truth", "strategy", "partition", "sweep", "run", "verify")
}


def _field_names(section: str) -> Dict[str, str]:
    """Lower-cased key -> declared field name (``m`` -> ``M``)."""
    return {name.lower(): name for name in SECTIONS[section].model_fields}


def _nest(values: Mapping[str, Optional[str]]) -> Dict[str, Dict[str, str]]:
    nested: Dict[str, Dict[str, str]] = {}
    for key, raw in values.items():
        if raw is None or raw.strip() == "":
            continue
        section, sep, field = key.lower().partition("__")
        if not sep or section not in SECTIONS:
            raise ConfigInvalid(key, f"unknown section (expected one of {', '.join(s.upper() for s in SECTIONS)})")
        names = _field_names(section)
        if field not in names:
            raise ConfigInvalid(f"{section}.{field}", "unknown field")
        nested.setdefault(section, {})[names[field]] = raw.strip()
    return nested


def _validation_to_config_error(err: ValidationError) -> ConfigInvalid:
    first = err.errors()[0]
    message = first["msg"].removeprefix("Value error, ")
    field = ".".join(str(part) for part in first["loc"])
    if not field and ": " in message:
        field, message = message.split(": ", 1)
    return ConfigInvalid(field or "config", message)


def build_run_config(
    values: Mapping[str, Optional[str]],
    overrides: Optional[Mapping[str, Mapping[str, object]]] = None,
) -> RunConfig:
    """Validate flat key-value pairs (plus nested overrides) into a RunConfig."""
    nested: Dict[str, Dict[str, object]] = dict(_nest(values))
    if OUT_ENV in os.environ and "out_dir" not in nested.get("run", {}):
        nested.setdefault("run", {})["out_dir"] = os.environ[OUT_ENV]
    if "workers" not in nested.get("run", {}):
        nested.setdefault("run", {})["workers"] = default_workers()
    for section, fields in (overrides or {}).items():
        for field, value in fields.items():
            if value is not None:
                nested.setdefault(section, {})[field] = value
    try:
        return RunConfig.model_validate(nested)
    except ValidationError as e:
        raise _validation_to_config_error(e) from e


def load_run_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, Mapping[str, object]]] = None,
) -> RunConfig:
    if path is None:
        values: Mapping[str, Optional[str]] = {}
    elif not os.path.isfile(path):
        raise ConfigInvalid("--config", f"no such file: {path}")
    else:
        values = dotenv_values(path)
        logger.info(f"Loaded {len(values)} settings from {path}")
    return build_run_config(values, overrides)


# ── Serialisation ─────────────────────────────────────────────────────────────

def _format_value(value) -> Optional[str]:
    if value is None:
        return None
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, dict):
        return ";".join(
            f"{task}:{','.join(str(h) for h in members)}" for task, members in sorted(value.items())
        )
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def config_lines(cfg: RunConfig) -> list:
    lines = []
    for section in SECTIONS:
        model: BaseModel = getattr(cfg, section)
        for field in type(model).model_fields:
            text = _format_value(getattr(model, field))
            if text is not None:
                lines.append(f"{section.upper()}__{field.upper()}={text}")
    return lines


def dump_run_config(cfg: RunConfig, out_dir: str) -> str:
    """Write the resolved configuration so that reloading it reproduces the run."""
    path = os.path.join(out_dir, RUN_CONFIG_FILE)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(config_lines(cfg)) + "\n")
    logger.info(f"Wrote {path}")
    return path


def config_snapshot(cfg: RunConfig) -> dict:
    return cfg.model_dump(mode="json")
