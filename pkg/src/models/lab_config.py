"""
Consistency-lab experiment loader and validator.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from src.models.fit_config import FitConfig, FitConfigError, get_fit_config
from src.modules.model import BlockParameters, ModelDimensionError

LAB_KEYS = {
    "name",
    "theta",
    "n_grid",
    "replications",
    "seed",
    "zeta",
    "gamma",
    "fit_profile",
    "fit_overrides",
}
OVERRIDABLE = {
    "max_outer_iterations",
    "fixed_point_max_iterations",
    "fixed_point_tolerance",
    "elbo_relative_tolerance",
    "damping",
    "restarts",
    "init_strategy",
    "jobs",
}


class LabConfigError(ValueError):
    pass


def _require_keys(obj: Dict[str, Any], keys: set, prefix: str) -> None:
    if not isinstance(obj, dict):
        raise LabConfigError(f"{prefix} must be a mapping")
    missing = sorted(k for k in keys if k not in obj)
    extra = sorted(k for k in obj.keys() if k not in keys)
    if missing:
        raise LabConfigError(f"{prefix} missing keys: {missing}")
    if extra:
        raise LabConfigError(f"{prefix} unknown keys: {extra}")


@dataclass(frozen=True)
class LabConfig:
    name: str
    theta: BlockParameters
    n_grid: Tuple[int, ...]
    replications: int
    seed: int
    zeta: float
    gamma: Optional[float]
    fit_config: FitConfig
    hash: str
    path: str


def _hash_config(config: Dict[str, Any]) -> str:
    content = yaml.safe_dump(config, sort_keys=True).encode("utf-8")
    return hashlib.sha256(content).hexdigest()[:12]


def load_lab_config(path) -> LabConfig:
    path = Path(path)
    if not path.exists():
        raise LabConfigError(f"lab config not found: {path}")
    with path.open("r", encoding="utf-8") as f:
        config = yaml.safe_load(f) or {}

    _require_keys(config, LAB_KEYS, "root")
    _require_keys(config["theta"], {"alpha", "pi"}, "theta")
    overrides = config["fit_overrides"] or {}
    if not isinstance(overrides, dict):
        raise LabConfigError("fit_overrides must be a mapping")
    unknown = sorted(set(overrides) - OVERRIDABLE)
    if unknown:
        raise LabConfigError(f"fit_overrides unknown keys: {unknown}")

    try:
        theta = BlockParameters(config["theta"]["alpha"], config["theta"]["pi"])
    except ModelDimensionError as exc:
        raise LabConfigError(f"theta: {exc}") from exc

    n_grid = tuple(int(n) for n in config["n_grid"])
    if not n_grid or any(n < max(2, theta.Q) for n in n_grid):
        raise LabConfigError(f"n_grid entries must be >= max(2, Q={theta.Q}), got {list(n_grid)}")
    if int(config["replications"]) < 1:
        raise LabConfigError("replications must be >= 1")
    gamma = config["gamma"]
    if gamma is not None and not 0.0 <= float(gamma) < 0.5:
        raise LabConfigError(f"gamma must be in [0, 0.5), got {gamma}")

    try:
        fit_config = get_fit_config(str(config["fit_profile"])).with_overrides(**overrides)
    except FitConfigError as exc:
        raise LabConfigError(f"fit settings: {exc}") from exc

    return LabConfig(
        name=str(config["name"]),
        theta=theta,
        n_grid=n_grid,
        replications=int(config["replications"]),
        seed=int(config["seed"]),
        zeta=float(config["zeta"]),
        gamma=None if gamma is None else float(gamma),
        fit_config=fit_config,
        hash=_hash_config(config),
        path=str(path),
    )
