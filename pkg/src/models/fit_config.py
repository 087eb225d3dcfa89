"""
Fitting configuration loader and validator.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Mapping

import yaml

from src.config import (
    CONFIG_DIR_ENV,
    DEFAULT_ZETA,
    IDENTIFIABILITY_TOL,
    INDEPENDENCE_TOL,
    MAX_STEP_HALVINGS,
    SEPARATION_CAP,
)

DEFAULT_CONFIG_DIR = Path(__file__).resolve().parents[2] / "config" / "fitting"
DEFAULT_CONFIG_NAME = "default"
INIT_STRATEGIES = ("spectral", "random")


class FitConfigError(ValueError):
    pass


def _require_keys(obj: Dict[str, Any], keys: set, prefix: str) -> None:
    if not isinstance(obj, dict):
        raise FitConfigError(f"{prefix} must be a mapping")
    missing = sorted(k for k in keys if k not in obj)
    extra = sorted(k for k in obj.keys() if k not in keys)
    if missing:
        raise FitConfigError(f"{prefix} missing keys: {missing}")
    if extra:
        raise FitConfigError(f"{prefix} unknown keys: {extra}")


def _validate_config(config: Dict[str, Any]) -> None:
    _require_keys(config, {"name", "variational", "restarts", "newton", "tolerances"}, "root")
    _require_keys(
        config["variational"],
        {
            "max_outer_iterations",
            "fixed_point_max_iterations",
            "fixed_point_tolerance",
            "elbo_relative_tolerance",
            "damping",
        },
        "variational",
    )
    _require_keys(config["restarts"], {"count", "init_strategy", "seed", "jobs"}, "restarts")
    _require_keys(
        config["newton"],
        {"max_iterations", "gradient_tolerance", "max_halvings", "separation_cap"},
        "newton",
    )
    _require_keys(config["tolerances"], {"independence", "identifiability", "zeta"}, "tolerances")


@dataclass(frozen=True)
class NewtonConfig:
    max_iterations: int = 100
    gradient_tolerance: float = 1e-8
    max_halvings: int = MAX_STEP_HALVINGS
    separation_cap: float = SEPARATION_CAP


@dataclass(frozen=True)
class Tolerances:
    independence: float = INDEPENDENCE_TOL
    identifiability: float = IDENTIFIABILITY_TOL
    zeta: float = DEFAULT_ZETA


@dataclass(frozen=True)
class FitConfig:
    """Variational EM settings; defaults mirror config/fitting/default.yaml."""

    max_outer_iterations: int = 500
    fixed_point_max_iterations: int = 200
    fixed_point_tolerance: float = 1e-6
    elbo_relative_tolerance: float = 1e-8
    damping: float = 0.0
    restarts: int = 10
    init_strategy: str = "spectral"
    seed: int = 0
    jobs: int = 1
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    tolerances: Tolerances = field(default_factory=Tolerances)
    name: str = DEFAULT_CONFIG_NAME
    hash: str = ""

    def __post_init__(self):
        positive = {
            "fixed_point_tolerance": self.fixed_point_tolerance,
            "elbo_relative_tolerance": self.elbo_relative_tolerance,
            "newton.gradient_tolerance": self.newton.gradient_tolerance,
            "tolerances.independence": self.tolerances.independence,
            "tolerances.identifiability": self.tolerances.identifiability,
        }
        for key, value in positive.items():
            if not value > 0:
                raise FitConfigError(f"{key} must be > 0, got {value}")
        if not 0.0 <= self.damping < 1.0:
            raise FitConfigError(f"damping must be in [0, 1), got {self.damping}")
        for key in ("max_outer_iterations", "fixed_point_max_iterations", "restarts", "jobs"):
            if int(getattr(self, key)) < 1:
                raise FitConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.init_strategy not in INIT_STRATEGIES:
            raise FitConfigError(f"init_strategy must be one of {INIT_STRATEGIES}, got {self.init_strategy!r}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise FitConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if not 0.0 < self.tolerances.zeta < 0.5:
            raise FitConfigError(f"tolerances.zeta must be in (0, 0.5), got {self.tolerances.zeta}")

    @classmethod
    def from_mapping(cls, config: Mapping[str, Any]) -> "FitConfig":
        var = config["variational"]
        rst = config["restarts"]
        nwt = config["newton"]
        tol = config["tolerances"]
        meta = config.get("meta", {})
        return cls(
            max_outer_iterations=int(var["max_outer_iterations"]),
            fixed_point_max_iterations=int(var["fixed_point_max_iterations"]),
            fixed_point_tolerance=float(var["fixed_point_tolerance"]),
            elbo_relative_tolerance=float(var["elbo_relative_tolerance"]),
            damping=float(var["damping"]),
            restarts=int(rst["count"]),
            init_strategy=str(rst["init_strategy"]),
            seed=int(rst["seed"]),
            jobs=int(rst["jobs"]),
            newton=NewtonConfig(
                max_iterations=int(nwt["max_iterations"]),
                gradient_tolerance=float(nwt["gradient_tolerance"]),
                max_halvings=int(nwt["max_halvings"]),
                separation_cap=float(nwt["separation_cap"]),
            ),
            tolerances=Tolerances(
                independence=float(tol["independence"]),
                identifiability=float(tol["identifiability"]),
                zeta=float(tol["zeta"]),
            ),
            name=str(config.get("name", DEFAULT_CONFIG_NAME)),
            hash=str(meta.get("hash", "")),
        )

    def with_overrides(self, **overrides: Any) -> "FitConfig":
        """Copy with the given non-None fields replaced."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **changes) if changes else self


def _hash_config(config: Dict[str, Any]) -> str:
    content = yaml.safe_dump(config, sort_keys=True).encode("utf-8")
    return hashlib.sha256(content).hexdigest()[:12]


def config_dir() -> Path:
    override = os.environ.get(CONFIG_DIR_ENV)
    return Path(override) if override else DEFAULT_CONFIG_DIR


def load_fit_config_file(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FitConfigError(f"config not found: {path}")
    with path.open("r", encoding="utf-8") as f:
        config = yaml.safe_load(f) or {}

    _validate_config(config)
    config["meta"] = {
        "name": config["name"],
        "hash": _hash_config(config),
        "path": str(path),
    }
    return config


@lru_cache(maxsize=8)
def _load_named(directory: str, name: str) -> Dict[str, Any]:
    return load_fit_config_file(Path(directory) / f"{name}.yaml")


def load_fit_config(name: str = DEFAULT_CONFIG_NAME) -> Dict[str, Any]:
    return _load_named(str(config_dir()), name)


def get_fit_config(name: str = DEFAULT_CONFIG_NAME) -> FitConfig:
    return FitConfig.from_mapping(load_fit_config(name))
