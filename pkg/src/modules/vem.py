"""
Variational EM engine
=====================
Mean-field inference for the multiplex SBM: tau[i, q] approximates P(Z_i = q | X).

- elbo: expected complete log-likelihood under tau plus the entropy of tau
- e_step: log-space fixed point for tau with damping and a monotone line search
- m_step: closed-form alpha and pi given tau
- fit: restarts (spectral first, then Dirichlet draws), best ELBO wins

Pair terms run over ordered pairs, so the tau update for node i collects both
the pairs where i is the source and the pairs where i is the target.
"""

from __future__ import annotations

import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import eigh
from scipy.special import softmax, xlogy
from sklearn.cluster import KMeans

from src.config import EMPTY_CELL_MASS, SIMPLEX_TOL, TAU_FLOOR
from src.models.fit_config import FitConfig, NewtonConfig
from src.modules.er import intercept_start
from src.modules.graph import EdgeCovariates, MultiplexGraph, layer_adjacency
from src.modules.logit import (
    LogitConvergenceError,
    QuasiSeparationWarning,
    fit_multinomial_logit,
)
from src.modules.model import (
    BlockParameters,
    CovariateBlockParameters,
    ModelDimensionError,
    check_identifiability,
    safe_log,
)
from src.modules.simulate import STREAM_INIT_BASE, make_rng

logger = logging.getLogger(__name__)

SPECTRAL_SMOOTHING = 0.1
MAX_LINE_SEARCH_HALVINGS = 30


class FitError(RuntimeError):
    pass


@dataclass
class VariationalPosterior:
    tau: np.ndarray
    converged: bool = True
    iterations: int = 0

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float)
        if tau.ndim != 2:
            raise ModelDimensionError(f"tau must be an n x Q matrix, got shape {tau.shape}")
        if np.any(tau < 0) or np.any(tau > 1):
            raise ModelDimensionError("tau entries must lie in [0, 1]")
        if np.any(np.abs(tau.sum(axis=1) - 1.0) > SIMPLEX_TOL):
            raise ModelDimensionError("tau rows must sum to 1")
        self.tau = tau

    @property
    def map_assignment(self) -> np.ndarray:
        return np.argmax(self.tau, axis=1)


@dataclass
class FitResult:
    theta: Union[BlockParameters, CovariateBlockParameters]
    tau: np.ndarray
    elbo_trace: List[float]
    converged: bool
    seed: int
    restart: int = 0
    n_restarts: int = 1
    wall_time: float = 0.0
    flags: List[str] = field(default_factory=list)
    icl: Optional[float] = None

    @property
    def elbo(self) -> float:
        return self.elbo_trace[-1] if self.elbo_trace else float("-inf")

    @property
    def map_assignment(self) -> np.ndarray:
        return np.argmax(self.tau, axis=1)

    @property
    def Q(self) -> int:
        return self.theta.Q

    @property
    def K(self) -> int:
        return self.theta.K

    @property
    def n(self) -> int:
        return self.tau.shape[0]

    def to_dict(self) -> Dict[str, Any]:
        """JSON form; wall time stays out so repeated runs serialise identically."""
        out = {
            "Q": self.Q,
            "K": self.K,
            "n": self.n,
            "alpha": self.theta.alpha.tolist(),
            "tau": self.tau.tolist(),
            "map_assignment": self.map_assignment.tolist(),
            "elbo_trace": list(self.elbo_trace),
            "icl": self.icl,
            "converged": self.converged,
            "flags": list(self.flags),
            "seed": self.seed,
            "restart": self.restart,
            "n_restarts": self.n_restarts,
        }
        if isinstance(self.theta, CovariateBlockParameters):
            theta = self.theta.to_dict()
            keys = ("d", "mu", "beta", "mu_stderr", "beta_stderr")
            out.update({key: theta[key] for key in keys if key in theta})
        else:
            out["pi"] = self.theta.pi.tolist()
        return out

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "FitResult":
        if "mu" in payload:
            theta = CovariateBlockParameters.from_dict(payload)
        else:
            theta = BlockParameters.from_dict(payload)
        return cls(
            theta=theta,
            tau=np.asarray(payload["tau"], dtype=float),
            elbo_trace=[float(v) for v in payload["elbo_trace"]],
            converged=bool(payload["converged"]),
            seed=int(payload["seed"]),
            restart=int(payload.get("restart", 0)),
            n_restarts=int(payload.get("n_restarts", 1)),
            flags=list(payload.get("flags", [])),
            icl=payload.get("icl"),
        )


class _WordPairTerms:
    """Pair log-probabilities that depend only on (word, q, l)."""

    def __init__(self, g: MultiplexGraph, theta: BlockParameters):
        if theta.K != g.K:
            raise ModelDimensionError(f"theta has K={theta.K} but graph has K={g.K}")
        self.present, self.stack = g.indicator_stack
        self.log_pi = safe_log(theta.pi)[:, :, self.present].transpose(2, 0, 1)
        self.log_alpha = safe_log(theta.alpha)

    def node_fields(self, tau: np.ndarray) -> np.ndarray:
        out_mass = self.stack @ tau
        in_mass = self.stack.transpose(0, 2, 1) @ tau
        return np.einsum("mil,mql->iq", out_mass, self.log_pi) + np.einsum("mil,mlq->iq", in_mass, self.log_pi)

    def expected(self, tau: np.ndarray) -> float:
        counts = tau.T @ self.stack @ tau
        return float(np.sum(counts * self.log_pi))


class _DensePairTerms:
    """Pair log-probabilities L[i, j, q, l] that vary per pair (covariate model)."""

    def __init__(self, L: np.ndarray, alpha: np.ndarray):
        self.L = L
        self.log_alpha = safe_log(alpha)

    def node_fields(self, tau: np.ndarray) -> np.ndarray:
        return np.einsum("ijql,jl->iq", self.L, tau) + np.einsum("jilq,jl->iq", self.L, tau)

    def expected(self, tau: np.ndarray) -> float:
        return float(np.einsum("iq,ijql,jl->", tau, self.L, tau, optimize=True))


PairTerms = Union[_WordPairTerms, _DensePairTerms]


def _elbo_from_terms(terms: PairTerms, tau: np.ndarray) -> float:
    return terms.expected(tau) + float(np.sum(tau @ terms.log_alpha)) - float(np.sum(xlogy(tau, tau)))


def _check_tau(tau: np.ndarray, n: int, Q: int) -> np.ndarray:
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (n, Q):
        raise ModelDimensionError(f"tau must have shape ({n}, {Q}), got {tau.shape}")
    return tau


def elbo(g: MultiplexGraph, tau: np.ndarray, theta: BlockParameters) -> float:
    """Variational lower bound on the marginal log-likelihood; 0 * log 0 counts as 0."""
    tau = _check_tau(tau, g.n, theta.Q)
    return _elbo_from_terms(_WordPairTerms(g, theta), tau)


def _floor_rows(tau: np.ndarray) -> np.ndarray:
    tau = np.maximum(tau, TAU_FLOOR)
    return tau / tau.sum(axis=1, keepdims=True)


def _fixed_point(terms: PairTerms, tau_init: np.ndarray, config: FitConfig) -> VariationalPosterior:
    tau = np.asarray(tau_init, dtype=float)
    current = _elbo_from_terms(terms, tau)
    lam = config.damping

    for iteration in range(1, config.fixed_point_max_iterations + 1):
        fields = terms.log_alpha[None, :] + terms.node_fields(tau)
        target = _floor_rows(softmax(fields, axis=1))
        target = (1.0 - lam) * target + lam * tau
        direction = target - tau
        step_norm = float(np.abs(direction).max())

        eta = 1.0
        accepted = None
        for _ in range(MAX_LINE_SEARCH_HALVINGS + 1):
            candidate = tau + eta * direction
            value = _elbo_from_terms(terms, candidate)
            if value >= current:
                accepted = (candidate, value)
                break
            eta /= 2.0
        if accepted is None:
            # no ascent direction left along the fixed-point step
            return VariationalPosterior(tau, converged=step_norm < config.fixed_point_tolerance, iterations=iteration)

        new_tau, current = accepted
        change = float(np.abs(new_tau - tau).max())
        tau = new_tau
        if change < config.fixed_point_tolerance:
            return VariationalPosterior(tau, converged=True, iterations=iteration)

    logger.debug("e-step hit %d iterations without converging", config.fixed_point_max_iterations)
    return VariationalPosterior(tau, converged=False, iterations=config.fixed_point_max_iterations)


def e_step(
    g: MultiplexGraph,
    theta: BlockParameters,
    tau_init: np.ndarray,
    config: FitConfig = FitConfig(),
) -> VariationalPosterior:
    tau_init = _check_tau(tau_init, g.n, theta.Q)
    return _fixed_point(_WordPairTerms(g, theta), tau_init, config)


def _alpha_hat(tau: np.ndarray) -> np.ndarray:
    s = tau.sum(axis=0)
    return s / s.sum()


def _pair_mass(tau: np.ndarray) -> np.ndarray:
    s = tau.sum(axis=0)
    return np.outer(s, s) - tau.T @ tau


def m_step(g: MultiplexGraph, tau: np.ndarray) -> BlockParameters:
    """Closed-form alpha and pi for fixed tau; empty block pairs become uniform and flagged."""
    tau = np.asarray(tau, dtype=float)
    if tau.ndim != 2 or tau.shape[0] != g.n:
        raise ModelDimensionError(f"tau must have {g.n} rows, got shape {tau.shape}")
    Q = tau.shape[1]
    present, stack = g.indicator_stack

    counts = np.zeros((Q, Q, g.n_words))
    counts[:, :, present] = (tau.T @ stack @ tau).transpose(1, 2, 0)
    totals = counts.sum(axis=2)
    empty = _pair_mass(tau) < EMPTY_CELL_MASS

    pi = np.empty_like(counts)
    safe_totals = np.where(empty, 1.0, totals)
    pi[:] = counts / safe_totals[:, :, None]
    pi[empty] = 1.0 / g.n_words

    flags = [f"empty_cell:{q},{l}" for q, l in zip(*np.nonzero(empty))]
    return BlockParameters(_alpha_hat(tau), pi, flags)


def m_step_covariates(
    g: MultiplexGraph,
    cov: EdgeCovariates,
    tau: np.ndarray,
    config: NewtonConfig = NewtonConfig(),
    previous: Optional[CovariateBlockParameters] = None,
    intercept_only: bool = False,
) -> CovariateBlockParameters:
    """
    Per block pair, a weighted multinomial logit with weights tau[i, q] * tau[j, l].

    A cell whose Newton fit does not converge falls back to the closed-form
    intercept-only fit and is flagged. intercept_only=True skips Newton and
    returns the closed form everywhere (beta = 0).
    """
    tau = np.asarray(tau, dtype=float)
    if cov.n != g.n:
        raise ModelDimensionError(f"covariates cover {cov.n} nodes but graph has {g.n}")
    Q = tau.shape[1]
    W = g.n_words
    X = cov.design_matrix()
    labels = g.words[g.offdiag].astype(np.int64)
    mass = _pair_mass(tau)

    mu = np.zeros((Q, Q, W - 1))
    beta = np.zeros((Q, Q, W - 1, cov.d))
    mu_stderr = np.full(mu.shape, np.nan)
    beta_stderr = np.full(beta.shape, np.nan)
    flags: List[str] = []

    for q in range(Q):
        for l in range(Q):
            if mass[q, l] < EMPTY_CELL_MASS:
                flags.append(f"empty_cell:{q},{l}")
                continue
            weights = np.outer(tau[:, q], tau[:, l])[g.offdiag]
            freq = np.bincount(labels, weights=weights, minlength=W) / weights.sum()
            closed_form = intercept_start(freq)
            if intercept_only:
                mu[q, l] = closed_form
                continue

            init = np.zeros((W - 1, 1 + cov.d))
            if previous is not None:
                init[:, 0] = previous.mu[q, l]
                init[:, 1:] = previous.beta[q, l]
            else:
                init[:, 0] = closed_form
            try:
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always", QuasiSeparationWarning)
                    fit = fit_multinomial_logit(X, labels, W, weights=weights, init=init, config=config)
            except LogitConvergenceError as exc:
                logger.warning("cell (%d, %d): %s; using intercept-only fit", q, l, exc)
                flags.append(f"logit_fallback:{q},{l}")
                mu[q, l] = closed_form
                continue
            if any(issubclass(w.category, QuasiSeparationWarning) for w in caught):
                flags.append(f"quasi_separation:{q},{l}")
            mu[q, l] = fit.coef[:, 0]
            beta[q, l] = fit.coef[:, 1:]
            stderr = fit.stderr
            mu_stderr[q, l] = stderr[:, 0]
            beta_stderr[q, l] = stderr[:, 1:]

    if intercept_only:
        return CovariateBlockParameters(_alpha_hat(tau), mu, beta, flags)
    return CovariateBlockParameters(_alpha_hat(tau), mu, beta, flags, mu_stderr, beta_stderr)


def elbo_covariates(
    g: MultiplexGraph, cov: EdgeCovariates, tau: np.ndarray, theta: CovariateBlockParameters
) -> float:
    tau = _check_tau(tau, g.n, theta.Q)
    return _elbo_from_terms(_DensePairTerms(theta.pair_log_probs(g, cov), theta.alpha), tau)


def _spectral_labels(g: MultiplexGraph, Q: int, random_state: int) -> Optional[np.ndarray]:
    B = np.zeros((g.n, g.n))
    for k in range(1, g.K + 1):
        A = layer_adjacency(g, k)
        B += A + A.T
    if not B.any():
        return None
    values, vectors = eigh(B)
    top = np.argsort(-np.abs(values), kind="stable")[:Q]
    embedding = vectors[:, top]
    km = KMeans(n_clusters=Q, n_init=10, random_state=random_state)
    return km.fit_predict(embedding)


def initial_tau(g: MultiplexGraph, Q: int, strategy: str, seed: int, restart: int) -> np.ndarray:
    """
    Starting tau for one restart.

    "spectral" applies to restart 0 only (k-means on the leading eigenvectors
    of the symmetrised layer sum, smoothed one-hot); every other restart, and
    spectral on an edgeless graph, draws Dirichlet(1, ..., 1) rows.
    """
    rng = make_rng(seed, STREAM_INIT_BASE + restart)
    if Q == 1:
        return np.ones((g.n, 1))
    if strategy == "spectral" and restart == 0:
        labels = _spectral_labels(g, Q, random_state=int(rng.integers(2 ** 31)))
        if labels is not None:
            tau = np.full((g.n, Q), SPECTRAL_SMOOTHING / Q)
            tau[np.arange(g.n), labels] += 1.0 - SPECTRAL_SMOOTHING
            return tau
        logger.debug("graph has no edges; spectral start replaced by a random start")
    return _floor_rows(rng.dirichlet(np.ones(Q), size=g.n))


def _converged(previous: float, current: float, rtol: float) -> bool:
    return abs(current - previous) <= rtol * max(abs(previous), 1.0)


def _near_empty_flags(alpha: np.ndarray, n: int) -> List[str]:
    small = np.flatnonzero(alpha < 1.0 / (10 * n))
    return [f"near_empty_block:{q}" for q in small]


def _run_restart(g: MultiplexGraph, Q: int, config: FitConfig, restart: int) -> FitResult:
    started = time.perf_counter()
    tau = initial_tau(g, Q, config.init_strategy, config.seed, restart)
    theta = m_step(g, tau)
    previous = elbo(g, tau, theta)
    trace: List[float] = []
    converged = False
    post = VariationalPosterior(tau)

    for _ in range(config.max_outer_iterations):
        post = e_step(g, theta, tau, config)
        tau = post.tau
        theta = m_step(g, tau)
        current = elbo(g, tau, theta)
        trace.append(current)
        if _converged(previous, current, config.elbo_relative_tolerance):
            converged = True
            break
        previous = current

    flags = list(theta.flags) + _near_empty_flags(theta.alpha, g.n)
    if not post.converged:
        flags.append("e_step_not_converged")
    logger.debug("restart %d: elbo=%.6f iterations=%d converged=%s", restart, trace[-1], len(trace), converged)
    return FitResult(
        theta=theta,
        tau=tau,
        elbo_trace=trace,
        converged=converged,
        seed=config.seed,
        restart=restart,
        wall_time=time.perf_counter() - started,
        flags=flags,
    )


def _run_restarts(runner, n_restarts: int, jobs: int) -> List[FitResult]:
    if jobs > 1 and n_restarts > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(runner, range(n_restarts)))
    return [runner(r) for r in range(n_restarts)]


def _pick_best(results: Sequence[FitResult], Q: int) -> FitResult:
    best = None
    for result in results:
        if not np.isfinite(result.elbo):
            continue
        if best is None or result.elbo > best.elbo:
            best = result
    if best is None:
        raise FitError(f"all {len(results)} restarts ended with a non-finite ELBO for Q={Q}")
    best.n_restarts = len(results)
    best.wall_time = sum(r.wall_time for r in results)
    return best


def _check_q(g: MultiplexGraph, Q: int) -> None:
    if Q < 1:
        raise FitError(f"Q must be >= 1, got {Q}")
    if Q > g.n:
        raise FitError(f"Q={Q} exceeds the number of nodes n={g.n}")


def fit(g: MultiplexGraph, Q: int, config: FitConfig = FitConfig()) -> FitResult:
    """Variational EM with restarts; returns the run with the best final ELBO (lowest index on ties)."""
    _check_q(g, Q)
    n_restarts = 1 if Q == 1 else config.restarts
    logger.info("fitting Q=%d on n=%d K=%d with %d restart(s)", Q, g.n, g.K, n_restarts)
    results = _run_restarts(lambda r: _run_restart(g, Q, config, r), n_restarts, config.jobs)
    best = _pick_best(results, Q)
    identifiability = check_identifiability(best.theta, config.tolerances.identifiability)
    if not identifiability.ok:
        logger.warning("Q=%d: fitted parameters not identifiable (%s)", Q, "; ".join(identifiability.reasons))
        best.flags.append("not_identifiable")
    logger.info("Q=%d: best restart %d, elbo=%.6f, converged=%s", Q, best.restart, best.elbo, best.converged)
    return best


def _run_covariate_restart(
    g: MultiplexGraph, cov: EdgeCovariates, Q: int, config: FitConfig, restart: int
) -> FitResult:
    started = time.perf_counter()
    tau = initial_tau(g, Q, config.init_strategy, config.seed, restart)
    theta = m_step_covariates(g, cov, tau, config.newton)
    previous = elbo_covariates(g, cov, tau, theta)
    trace: List[float] = []
    converged = False
    post = VariationalPosterior(tau)

    for _ in range(config.max_outer_iterations):
        terms = _DensePairTerms(theta.pair_log_probs(g, cov), theta.alpha)
        post = _fixed_point(terms, tau, config)
        tau = post.tau
        theta = m_step_covariates(g, cov, tau, config.newton, previous=theta)
        current = elbo_covariates(g, cov, tau, theta)
        trace.append(current)
        if _converged(previous, current, config.elbo_relative_tolerance):
            converged = True
            break
        previous = current

    flags = list(theta.flags) + _near_empty_flags(theta.alpha, g.n)
    if not post.converged:
        flags.append("e_step_not_converged")
    return FitResult(
        theta=theta,
        tau=tau,
        elbo_trace=trace,
        converged=converged,
        seed=config.seed,
        restart=restart,
        wall_time=time.perf_counter() - started,
        flags=flags,
    )


def fit_covariates(
    g: MultiplexGraph, cov: EdgeCovariates, Q: int, config: FitConfig = FitConfig()
) -> FitResult:
    """Variational EM for the covariate SBM; same restart and convergence contract as fit."""
    _check_q(g, Q)
    if cov.n != g.n:
        raise ModelDimensionError(f"covariates cover {cov.n} nodes but graph has {g.n}")
    n_restarts = 1 if Q == 1 else config.restarts
    logger.info("fitting covariate SBM Q=%d on n=%d K=%d d=%d", Q, g.n, g.K, cov.d)
    results = _run_restarts(lambda r: _run_covariate_restart(g, cov, Q, config, r), n_restarts, config.jobs)
    return _pick_best(results, Q)


def map_tau(z: Sequence[int], Q: int) -> np.ndarray:
    """Hard (one-hot) tau for a labelling."""
    z = np.asarray(z, dtype=np.int64)
    tau = np.zeros((z.size, Q))
    tau[np.arange(z.size), z] = 1.0
    return tau


__all__ = [
    "FitConfig",
    "FitError",
    "FitResult",
    "VariationalPosterior",
    "e_step",
    "elbo",
    "elbo_covariates",
    "fit",
    "fit_covariates",
    "initial_tau",
    "m_step",
    "m_step_covariates",
    "map_tau",
]
