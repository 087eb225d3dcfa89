"""
Consistency lab
===============
Simulate from a known theta*, fit by variational EM, align block labels and
record how far the estimates land from the truth as n grows.

Distances are infinity-norms: d(pi_hat, pi*) over every pi entry and
d(alpha_hat, alpha*) over alpha, both after the label permutation that
minimises the pi distance.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations, permutations
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_rand_score

from src.config import DEFAULT_ZETA, IDENTIFIABILITY_TOL
from src.models.fit_config import FitConfig
from src.modules.model import (
    BlockParameters,
    IdentifiabilityReport,
    ModelDimensionError,
    check_identifiability,
    permute_blocks,
)
from src.modules.simulate import sample_sbm
from src.modules.vem import fit

logger = logging.getLogger(__name__)

EXHAUSTIVE_ALIGNMENT_MAX_Q = 8
TABLE_COLUMNS = ["n", "replication", "seed", "err_pi", "err_alpha", "ari", "converged", "error"]


@dataclass
class AssumptionReport:
    ok: bool
    reasons: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    identifiability: Optional[IdentifiabilityReport] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ok": self.ok,
            "reasons": list(self.reasons),
            "warnings": list(self.warnings),
            "identifiability": self.identifiability.to_dict() if self.identifiability else None,
        }


class AssumptionError(ValueError):
    def __init__(self, report: AssumptionReport):
        super().__init__("theta* violates the lab preconditions: " + "; ".join(report.reasons))
        self.report = report


def check_assumptions(
    theta: BlockParameters,
    zeta: float = DEFAULT_ZETA,
    gamma: Optional[float] = None,
    tol: float = IDENTIFIABILITY_TOL,
) -> AssumptionReport:
    """
    Preconditions for the consistency experiments.

    - no two blocks share both their outgoing and incoming word distributions
    - every pi entry is 0, 1 or inside [zeta, 1 - zeta]
    - every alpha_q lies in [gamma, 1 - gamma]; with gamma=None, strictly
      inside (0, 1) when Q >= 2
    Plus the identifiability check on r = pi . alpha.
    """
    reasons: List[str] = []
    notes: List[str] = []
    pi, alpha = theta.pi, theta.alpha

    for q, q2 in combinations(range(theta.Q), 2):
        rows = np.abs(pi[q] - pi[q2]).max()
        cols = np.abs(pi[:, q] - pi[:, q2]).max()
        if max(rows, cols) <= tol:
            reasons.append(f"identical_blocks:{q},{q2}")

    degenerate = (pi <= tol) | (pi >= 1 - tol)
    inside = (pi >= zeta) & (pi <= 1 - zeta)
    outside = int((~degenerate & ~inside).sum())
    if outside:
        reasons.append(f"pi_outside_zeta:{outside}")
    if degenerate.any():
        notes.append(f"{int(degenerate.sum())} pi entries are exactly 0 or 1")

    if theta.Q >= 2:
        if gamma is None:
            bad = np.flatnonzero((alpha <= 0) | (alpha >= 1))
        else:
            bad = np.flatnonzero((alpha < gamma) | (alpha > 1 - gamma))
        if bad.size:
            reasons.append(f"alpha_out_of_range:{','.join(str(q) for q in bad)}")

    ident = check_identifiability(theta, tol)
    reasons.extend(f"identifiability:{r}" for r in ident.reasons)
    return AssumptionReport(ok=not reasons, reasons=reasons, warnings=notes, identifiability=ident)


def _pi_distance(theta_hat: BlockParameters, theta_star: BlockParameters, sigma: Sequence[int]) -> float:
    sigma = np.asarray(sigma)
    return float(np.abs(theta_hat.pi[np.ix_(sigma, sigma)] - theta_star.pi).max())


def align_blocks(theta_hat: BlockParameters, theta_star: BlockParameters) -> np.ndarray:
    """
    Permutation sigma with permute_blocks(theta_hat, sigma) closest to theta_star.

    Exhaustive over all Q! permutations (minimum pi distance, then alpha
    distance) for Q <= 8; above that, Hungarian matching on r-vector and alpha
    differences.
    """
    if theta_hat.Q != theta_star.Q or theta_hat.K != theta_star.K:
        raise ModelDimensionError("cannot align parameters with different Q or K")
    Q = theta_star.Q
    if Q <= EXHAUSTIVE_ALIGNMENT_MAX_Q:
        best_key, best = None, None
        for sigma in permutations(range(Q)):
            key = (
                _pi_distance(theta_hat, theta_star, sigma),
                float(np.abs(theta_hat.alpha[list(sigma)] - theta_star.alpha).max()),
            )
            if best_key is None or key < best_key:
                best_key, best = key, sigma
        return np.asarray(best, dtype=np.int64)

    r_hat = np.einsum("qlw,l->qw", theta_hat.pi, theta_hat.alpha)
    r_star = np.einsum("qlw,l->qw", theta_star.pi, theta_star.alpha)
    cost = np.abs(r_star[:, None, :] - r_hat[None, :, :]).max(axis=2)
    cost += np.abs(theta_star.alpha[:, None] - theta_hat.alpha[None, :])
    rows, cols = linear_sum_assignment(cost)
    sigma = np.empty(Q, dtype=np.int64)
    sigma[rows] = cols
    return sigma


def parameter_errors(theta_hat: BlockParameters, theta_star: BlockParameters) -> Tuple[float, float, np.ndarray]:
    sigma = align_blocks(theta_hat, theta_star)
    aligned = permute_blocks(theta_hat, sigma)
    err_pi = float(np.abs(aligned.pi - theta_star.pi).max())
    err_alpha = float(np.abs(aligned.alpha - theta_star.alpha).max())
    return err_pi, err_alpha, sigma


def replication_seed(seed: int, n: int, replication: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(n), int(replication)]).generate_state(1, dtype=np.uint64)[0])


def _run_replication(theta_star: BlockParameters, n: int, replication: int, seed: int, config: FitConfig) -> Dict[str, Any]:
    run_seed = replication_seed(seed, n, replication)
    row = {
        "n": n,
        "replication": replication,
        "seed": run_seed,
        "err_pi": np.nan,
        "err_alpha": np.nan,
        "ari": np.nan,
        "converged": False,
        "error": "",
    }
    try:
        g, z = sample_sbm(theta_star, n, run_seed)
        result = fit(g, theta_star.Q, config.with_overrides(seed=run_seed))
        err_pi, err_alpha, _ = parameter_errors(result.theta, theta_star)
        row.update(
            err_pi=err_pi,
            err_alpha=err_alpha,
            ari=float(adjusted_rand_score(z, result.map_assignment)),
            converged=result.converged,
        )
    except (ValueError, RuntimeError) as exc:
        logger.warning("n=%d replication=%d failed: %s", n, replication, exc)
        row["error"] = str(exc)
    return row


def error_vs_n(
    theta_star: BlockParameters,
    n_grid: Sequence[int],
    replications: int,
    seed: int,
    config: FitConfig = FitConfig(),
    zeta: Optional[float] = None,
    gamma: Optional[float] = None,
    strict: bool = True,
) -> pd.DataFrame:
    """
    One row per (n, replication) with aligned errors, ARI against the planted
    labels and the convergence flag. Failed fits are recorded, not raised.

    zeta defaults to the fitting profile's tolerance, as does the
    identifiability threshold.
    """
    tolerances = config.tolerances
    zeta = tolerances.zeta if zeta is None else zeta
    report = check_assumptions(theta_star, zeta=zeta, gamma=gamma, tol=tolerances.identifiability)
    if not report.ok:
        if strict:
            raise AssumptionError(report)
        logger.warning("running despite violated preconditions: %s", report.reasons)

    tasks = [(int(n), rep) for n in n_grid for rep in range(int(replications))]
    inner = config.with_overrides(jobs=1)
    logger.info("error_vs_n: %d runs over n_grid=%s", len(tasks), list(n_grid))

    def run(task):
        return _run_replication(theta_star, task[0], task[1], seed, inner)

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            rows = list(pool.map(run, tasks))
    else:
        rows = [run(t) for t in tasks]
    return pd.DataFrame(rows, columns=TABLE_COLUMNS)


def summarize_errors(table: pd.DataFrame) -> pd.DataFrame:
    """Medians per n over the successful replications."""
    ok = table[table["error"].fillna("") == ""]
    summary = (
        ok.groupby("n")
        .agg(
            median_err_pi=("err_pi", "median"),
            median_err_alpha=("err_alpha", "median"),
            median_ari=("ari", "median"),
            converged=("converged", "sum"),
        )
        .reset_index()
    )
    counts = table.groupby("n").size().rename("replications").reset_index()
    failures = (table["error"].fillna("") != "").groupby(table["n"]).sum().rename("failures").reset_index()
    out = counts.merge(failures, on="n").merge(summary, on="n", how="left")
    return out[["n", "replications", "failures", "converged", "median_err_pi", "median_err_alpha", "median_ari"]]
