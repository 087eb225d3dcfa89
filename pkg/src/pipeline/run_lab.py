"""
One-command consistency experiment.

Steps:
1. Check the lab preconditions on theta*
2. Simulate and fit every (n, replication) pair
3. Summarise medians per n and write the manifest
"""

from __future__ import annotations

import argparse
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import pandas as pd

from src.models.lab_config import LabConfig, LabConfigError, load_lab_config
from src.modules import consistency_lab
from src.modules.result_store import read_json, write_csv_atomic, write_json_atomic

logger = logging.getLogger(__name__)


@dataclass
class LabPaths:
    assumptions_json: Path
    errors_csv: Path
    summary_csv: Path
    manifest_json: Path


def _log(msg: str) -> None:
    logger.info("[lab] %s", msg)


def _file_exists(path: Path) -> bool:
    return path.exists()


def build_paths(out_dir: Path) -> LabPaths:
    return LabPaths(
        assumptions_json=out_dir / "assumptions.json",
        errors_csv=out_dir / "error_vs_n.csv",
        summary_csv=out_dir / "error_vs_n_summary.csv",
        manifest_json=out_dir / "lab_manifest.json",
    )


def _cache_matches(paths: LabPaths, config: LabConfig) -> bool:
    if not (_file_exists(paths.errors_csv) and _file_exists(paths.manifest_json)):
        return False
    return read_json(paths.manifest_json).get("config_hash") == config.hash


def run_lab(
    config_path: str,
    out_dir: str = "data/lab",
    force: bool = False,
    strict: bool = True,
    jobs: Optional[int] = None,
) -> Dict[str, str]:
    """
    Run the error-versus-n experiment described by a lab config.

    A previous table is reused when the manifest records the same config
    hash, unless force is set. Returns per-step status and artifact paths.
    """
    config = load_lab_config(config_path)
    fit_config = config.fit_config.with_overrides(jobs=jobs)
    paths = build_paths(Path(out_dir))
    status: Dict[str, str] = {}

    _log(f"starting lab run {config.name} (hash={config.hash})")

    # Step 1: preconditions
    _log("step 1/3 checking preconditions")
    report = consistency_lab.check_assumptions(
        config.theta, zeta=config.zeta, gamma=config.gamma, tol=fit_config.tolerances.identifiability
    )
    write_json_atomic(paths.assumptions_json, report.to_dict())
    status["assumptions"] = "pass" if report.ok else "fail"
    if not report.ok and strict:
        raise consistency_lab.AssumptionError(report)

    # Step 2: simulate + fit
    if _cache_matches(paths, config) and not force:
        _log(f"step 2/3 table cached: {paths.errors_csv}")
        table = pd.read_csv(paths.errors_csv, keep_default_na=True)
        status["errors"] = "cached"
    else:
        _log(f"step 2/3 running {len(config.n_grid) * config.replications} fits")
        table = consistency_lab.error_vs_n(
            config.theta,
            config.n_grid,
            config.replications,
            config.seed,
            config=fit_config,
            zeta=config.zeta,
            gamma=config.gamma,
            strict=False,
        )
        write_csv_atomic(table, paths.errors_csv)
        status["errors"] = "refreshed"

    # Step 3: summary
    _log("step 3/3 summarising")
    summary = consistency_lab.summarize_errors(table)
    write_csv_atomic(summary, paths.summary_csv)
    write_json_atomic(
        paths.manifest_json,
        {
            "name": config.name,
            "config_hash": config.hash,
            "config_path": config.path,
            "fit_profile": config.fit_config.name,
            "n_grid": list(config.n_grid),
            "replications": config.replications,
            "seed": config.seed,
        },
    )
    status["summary"] = "refreshed"

    status["assumptions_json"] = str(paths.assumptions_json)
    status["errors_csv"] = str(paths.errors_csv)
    status["summary_csv"] = str(paths.summary_csv)
    status["manifest_json"] = str(paths.manifest_json)
    _log("lab run finished")
    return status


def main() -> int:
    parser = argparse.ArgumentParser(description="Run the estimator error versus n experiment")
    parser.add_argument("--config", type=str, required=True, help="Lab config YAML, e.g. config/lab/two_block.yaml")
    parser.add_argument("--out", type=str, default="data/lab", help="Output directory")
    parser.add_argument("--force", action="store_true", help="Recompute even if a matching table exists")
    parser.add_argument("--jobs", type=int, default=None, help="Parallel replications")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="[%(name)s] %(levelname)s %(message)s")

    try:
        run_lab(args.config, out_dir=args.out, force=args.force, jobs=args.jobs)
        return 0
    except (LabConfigError, consistency_lab.AssumptionError) as exc:
        _log(f"ERROR: {exc}")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
