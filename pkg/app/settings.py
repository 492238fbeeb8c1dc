"""
Run configuration from ``key = value`` files and command-line overrides.

Files are parsed with python-dotenv, so ``#`` comments, quoting and blank
lines behave as in a ``.env`` file. Precedence, lowest first: built-in
defaults, physical-unit defaults (when requested), file values, overrides.
"""
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from dotenv import dotenv_values
from pydantic import ValidationError

from app.errors import ConfigError
from schemas import PHYSICAL_UNIT_DEFAULTS, ControllerConfig, DroopCurve, RunConfig

logger = logging.getLogger(__name__)

CONTROLLER_KEYS = {
    "alpha", "alpha_d", "alpha_u", "r_p", "r_d", "epsilon", "T", "inner_iterations",
    "v_min", "v_max", "u0_policy", "deflation", "capability",
}
DROOP_KEYS = {"droop_v1": "v1", "droop_v2": "v2", "droop_v3": "v3", "droop_v4": "v4"}
RUN_KEYS = {
    "controller", "plant_tol", "plant_max_iter", "seed", "noise_std", "max_outer",
    "static_tol", "setpoints_per_sample", "use_agents",
}
KNOWN_KEYS = CONTROLLER_KEYS | set(DROOP_KEYS) | RUN_KEYS | {"physical_units"}
AUTO = {"", "auto", "none"}
TRUE = {"1", "true", "yes", "on"}


def load_config_file(path: Union[str, Path]) -> Dict[str, Optional[str]]:
    """Read a config file; unknown keys are rejected."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = dict(dotenv_values(path))
    unknown = sorted(set(values) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s) in {path}: {', '.join(unknown)}")
    return values


def _clean(values: Mapping[str, Any]) -> Dict[str, Any]:
    out = {}
    for key, value in values.items():
        if value is None:
            continue
        if isinstance(value, str) and value.strip().lower() in AUTO:
            out[key] = None
        else:
            out[key] = value.strip() if isinstance(value, str) else value
    return out


def _validation_message(exc: ValidationError) -> str:
    err = exc.errors()[0]
    where = ".".join(str(part) for part in err.get("loc", ())) or "config"
    return f"{where}: {err.get('msg', 'invalid value')}"


def build_run_config(file_values: Optional[Mapping[str, Any]] = None,
                     overrides: Optional[Mapping[str, Any]] = None,
                     physical_units: bool = False) -> RunConfig:
    """Merge defaults, file values and overrides into a validated RunConfig."""
    merged: Dict[str, Any] = {}
    merged.update(_clean(file_values or {}))
    merged.update(_clean(overrides or {}))
    unknown = sorted(set(merged) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")

    use_physical = physical_units or str(merged.pop("physical_units", "") or "").lower() in TRUE
    controller_values: Dict[str, Any] = dict(PHYSICAL_UNIT_DEFAULTS) if use_physical else {}
    if "inner_iterations" in merged:
        merged["T"] = merged.pop("inner_iterations")
    # an unset voltage limit falls back to the network band when the controller is built
    controller_values.update({
        k: v for k, v in merged.items()
        if k in CONTROLLER_KEYS and not (v is None and k in ("v_min", "v_max"))
    })
    droop_values = {DROOP_KEYS[k]: v for k, v in merged.items() if k in DROOP_KEYS and v is not None}
    run_values = {k: v for k, v in merged.items() if k in RUN_KEYS and v is not None}
    try:
        if droop_values:
            controller_values["droop"] = DroopCurve(**droop_values)
        controller_cfg = ControllerConfig(**controller_values)
        run_cfg = RunConfig(controller_config=controller_cfg, **run_values)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {_validation_message(exc)}") from exc
    logger.debug("run configuration: %s", run_cfg.model_dump())
    return run_cfg
