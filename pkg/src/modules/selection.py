"""
ICL model selection
===================
ICL(Q) = log p(X, Z_map; theta_hat) - 1/2 * (P_Q * log(K n (n-1)) + (Q - 1) * log n)

P_Q = Q^2 (2^K - 1) (1 + d) counts the pair-distribution parameters (d = 0
without covariates). Natural log throughout.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from src.config import ICL_TIE_TOL
from src.models.fit_config import FitConfig
from src.modules.graph import EdgeCovariates, MultiplexGraph
from src.modules.model import CovariateBlockParameters, complete_log_likelihood, safe_log
from src.modules.vem import FitResult, fit

logger = logging.getLogger(__name__)


class SmallGraphWarning(UserWarning):
    pass


class SelectionError(ValueError):
    pass


def icl_penalty(Q: int, K: int, n: int, d: int = 0) -> float:
    P = Q * Q * (2 ** K - 1) * (1 + d)
    return 0.5 * (P * math.log(K * n * (n - 1)) + (Q - 1) * math.log(n))


def icl(g: MultiplexGraph, result: FitResult) -> float:
    completed = complete_log_likelihood(g, result.map_assignment, result.theta)
    return completed - icl_penalty(result.Q, g.K, g.n)


def completed_log_likelihood_covariates(
    g: MultiplexGraph, cov: EdgeCovariates, z: np.ndarray, theta: CovariateBlockParameters
) -> float:
    L = theta.pair_log_probs(g, cov)
    z = np.asarray(z, dtype=np.int64)
    pair_terms = L[np.arange(g.n)[:, None], np.arange(g.n)[None, :], z[:, None], z[None, :]]
    return float(pair_terms[g.offdiag].sum() + safe_log(theta.alpha)[z].sum())


def icl_covariates(g: MultiplexGraph, cov: EdgeCovariates, result: FitResult) -> float:
    theta = result.theta
    if not isinstance(theta, CovariateBlockParameters):
        return icl(g, result)
    completed = completed_log_likelihood_covariates(g, cov, result.map_assignment, theta)
    return completed - icl_penalty(theta.Q, g.K, g.n, theta.d)


@dataclass
class IclRecord:
    Q: int
    elbo: Optional[float]
    completed_log_likelihood: Optional[float]
    penalty: float
    icl: Optional[float]
    converged: bool = False
    flags: List[str] = field(default_factory=list)
    error: Optional[str] = None
    fit: Optional[FitResult] = field(default=None, repr=False)


@dataclass
class IclReport:
    records: List[IclRecord]
    selected_q: Optional[int]
    n: int
    K: int
    flags: List[str] = field(default_factory=list)
    fits: Dict[int, FitResult] = field(default_factory=dict, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "K": self.K,
            "selected_q": self.selected_q,
            "flags": list(self.flags),
            "records": [
                {
                    "Q": r.Q,
                    "elbo": r.elbo,
                    "completed_log_likelihood": r.completed_log_likelihood,
                    "penalty": r.penalty,
                    "icl": r.icl,
                    "converged": r.converged,
                    "flags": list(r.flags),
                    "error": r.error,
                }
                for r in self.records
            ],
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"Q": [r.Q for r in self.records], "ICL": [r.icl for r in self.records]})


def _select(records: Iterable[IclRecord]) -> Optional[int]:
    """Largest ICL; values within ICL_TIE_TOL of the best go to the smaller Q."""
    scored = [r for r in records if r.icl is not None and np.isfinite(r.icl)]
    if not scored:
        return None
    best = max(r.icl for r in scored)
    return min(r.Q for r in scored if r.icl >= best - ICL_TIE_TOL)


def _score_q(g: MultiplexGraph, Q: int, config: FitConfig) -> IclRecord:
    penalty = icl_penalty(Q, g.K, g.n)
    try:
        result = fit(g, Q, config)
    except (ValueError, RuntimeError) as exc:
        logger.warning("Q=%d failed: %s", Q, exc)
        return IclRecord(Q=Q, elbo=None, completed_log_likelihood=None, penalty=penalty, icl=None, error=str(exc))
    completed = complete_log_likelihood(g, result.map_assignment, result.theta)
    result.icl = completed - penalty
    return IclRecord(
        Q=Q,
        elbo=result.elbo,
        completed_log_likelihood=completed,
        penalty=penalty,
        icl=result.icl,
        converged=result.converged,
        flags=list(result.flags),
        fit=result,
    )


def select_q(g: MultiplexGraph, q_range: Iterable[int], config: FitConfig = FitConfig()) -> IclReport:
    """Fit every candidate Q, score it by ICL and pick the best."""
    candidates = sorted({int(q) for q in q_range})
    if not candidates:
        raise SelectionError("Q range is empty")
    if candidates[0] < 1 or candidates[-1] > g.n:
        raise SelectionError(f"Q range must lie in [1, n={g.n}], got {candidates[0]}..{candidates[-1]}")

    flags = []
    small = [q for q in candidates if g.n < 2 * q]
    if small:
        msg = f"n={g.n} is smaller than 2Q for Q in {small}"
        warnings.warn(msg, SmallGraphWarning, stacklevel=2)
        logger.warning(msg)
        flags.append("n_below_2q")

    # one pool level: candidates run in parallel, restarts inside each run sequentially
    if config.jobs > 1 and len(candidates) > 1:
        inner = config.with_overrides(jobs=1)
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            records = list(pool.map(lambda q: _score_q(g, q, inner), candidates))
    else:
        records = [_score_q(g, q, config) for q in candidates]

    selected = _select(records)
    if selected is None:
        flags.append("no_candidate_succeeded")
    fits = {r.Q: r.fit for r in records if r.fit is not None}
    for r in records:
        logger.info("Q=%d icl=%s", r.Q, "failed" if r.icl is None else f"{r.icl:.4f}")
    return IclReport(records=records, selected_q=selected, n=g.n, K=g.K, flags=flags, fits=fits)
