"""
Lab Configuration
Environment defaults (.env) and flat key=value solver config files.
"""

import os
from pathlib import Path
from typing import Optional

from dotenv import dotenv_values, load_dotenv

from solver import DEFAULT_TOL, SCHEMES, SolveConfig, eps_schedule_to

# Load settings from .env file
load_dotenv()
load_dotenv(Path(__file__).parent / ".env")

CONFIG_KEYS = ("eps_schedule", "eps_min", "dt_factor", "tol", "max_iters", "scheme")


def env_float(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return float(raw)
    except ValueError:
        raise ValueError(f"{name}={raw!r} is not a number")


def env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"{name}={raw!r} is not an integer")


def out_dir() -> Path:
    return Path(os.getenv("LAB_OUT_DIR", "."))


def default_seed() -> int:
    return env_int("LAB_SEED", 0)


def default_solve_config(dim: int, tol: Optional[float] = None, eps_min: Optional[float] = None,
                         max_iters: Optional[int] = None, dt_factor: Optional[float] = None,
                         scheme: str = "implicit") -> SolveConfig:
    """
    SolveConfig for a dimension; unset arguments fall back to LAB_* environment
    variables and then to the built-in defaults.
    """
    if tol is None:
        tol = env_float(f"LAB_TOL_{dim}D", DEFAULT_TOL.get(dim, 1e-5))
    if eps_min is None:
        eps_min = env_float("LAB_EPS_MIN", 1e-4)
    if max_iters is None:
        max_iters = env_int("LAB_MAX_ITERS", 2000)
    if dt_factor is None:
        dt_factor = env_float("LAB_DT_FACTOR", 0.5)
    return SolveConfig(eps_schedule=eps_schedule_to(eps_min), dt_factor=dt_factor, tol=tol,
                       max_iters=max_iters, scheme=scheme)


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ValueError(f"config key '{key}': {raw!r} is not a number")


def load_solve_config(path, dim: int) -> SolveConfig:
    """
    Read a flat key=value file such as

        tol=1e-6
        eps_schedule=1e-1,1e-2,1e-3
        scheme=explicit

    Missing keys take the defaults of default_solve_config.
    """
    path = Path(path)
    if not path.exists():
        raise ValueError(f"config file not found: {path}")
    values = dotenv_values(path)
    unknown = [k for k in values if k not in CONFIG_KEYS]
    if unknown:
        raise ValueError(f"unknown config key(s) in {path.name}: {', '.join(unknown)}")
    if "eps_schedule" in values and "eps_min" in values:
        raise ValueError("give either eps_schedule or eps_min, not both")

    base = default_solve_config(
        dim,
        tol=_parse_float("tol", values["tol"]) if "tol" in values else None,
        eps_min=_parse_float("eps_min", values["eps_min"]) if "eps_min" in values else None,
        dt_factor=_parse_float("dt_factor", values["dt_factor"]) if "dt_factor" in values else None,
    )
    schedule = base.eps_schedule
    if "eps_schedule" in values:
        schedule = tuple(_parse_float("eps_schedule", e) for e in (values["eps_schedule"] or "").split(","))
    max_iters = base.max_iters
    if "max_iters" in values:
        try:
            max_iters = int(values["max_iters"])
        except (TypeError, ValueError):
            raise ValueError(f"config key 'max_iters': {values['max_iters']!r} is not an integer")
    scheme = values.get("scheme") or base.scheme
    if scheme not in SCHEMES:
        raise ValueError(f"config key 'scheme' must be one of {SCHEMES}, got {scheme!r}")
    print(f"📋 Loaded solver config from {path.name}")
    return SolveConfig(eps_schedule=schedule, dt_factor=base.dt_factor, tol=base.tol,
                       max_iters=max_iters, scheme=scheme)
