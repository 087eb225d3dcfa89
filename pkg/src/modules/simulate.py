"""
Seeded multiplex graph samplers
===============================
Randomness comes from numpy's Philox counter-based generator. A run seed is
combined with a fixed stream id into the 128-bit Philox key, so every sampled
quantity (labels, pair words, covariates) has its own reproducible stream:

    key = (seed << 64) | stream

Pair words use one uniform per ordered pair, consumed in row-major pair
order (index i * n + j), and are mapped to words by inverse CDF. The same
pair uniforms drive both the ER and the SBM sampler, so a one-block SBM
reproduces the ER sample exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np
from scipy.special import log_softmax

from src.modules.er import CovariateModel, ErParameters
from src.modules.graph import EdgeCovariates, MultiplexGraph
from src.modules.model import BlockParameters, CovariateBlockParameters, ModelDimensionError

logger = logging.getLogger(__name__)

STREAM_LABELS = 1
STREAM_PAIRS = 2
STREAM_COVARIATES = 3
STREAM_MONTE_CARLO = 5
STREAM_INIT_BASE = 16  # restart r uses STREAM_INIT_BASE + r

SEED_LIMIT = 2 ** 64


class SimulationSpecError(ValueError):
    pass


def make_rng(seed: int, stream: int) -> np.random.Generator:
    seed = int(seed)
    if not 0 <= seed < SEED_LIMIT:
        raise SimulationSpecError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.Philox(key=(seed << 64) | int(stream)))


def _inverse_cdf(cumulative: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(cumulative, u, side="right")
    return np.minimum(idx, cumulative.size - 1)


def _pair_uniforms(n: int, seed: int) -> np.ndarray:
    return make_rng(seed, STREAM_PAIRS).random(n * n).reshape(n, n)


def sample_labels(alpha: np.ndarray, n: int, seed: int) -> np.ndarray:
    u = make_rng(seed, STREAM_LABELS).random(n)
    return _inverse_cdf(np.cumsum(alpha), u).astype(np.int64)


def sample_er(params: ErParameters, n: int, K: int, seed: int) -> MultiplexGraph:
    if params.K != K:
        raise ModelDimensionError(f"pi covers K={params.K} layers, asked for K={K}")
    u = _pair_uniforms(n, seed)
    return MultiplexGraph(_inverse_cdf(np.cumsum(params.pi), u), K)


def sample_sbm(theta: BlockParameters, n: int, seed: int) -> Tuple[MultiplexGraph, np.ndarray]:
    z = sample_labels(theta.alpha, n, seed)
    u = _pair_uniforms(n, seed)
    words = np.zeros((n, n), dtype=np.int64)
    for q in range(theta.Q):
        for l in range(theta.Q):
            cell = (z[:, None] == q) & (z[None, :] == l)
            if cell.any():
                words[cell] = _inverse_cdf(np.cumsum(theta.pi[q, l]), u[cell])
    return MultiplexGraph(words, theta.K), z


def sample_covariates(n: int, d: int, seed: int, scale: float = 1.0) -> EdgeCovariates:
    """Standard-normal (times scale) covariates, i.i.d. per ordered pair."""
    if d < 0:
        raise SimulationSpecError(f"covariate dimension must be >= 0, got {d}")
    y = make_rng(seed, STREAM_COVARIATES).standard_normal((n, n, d)) * scale
    return EdgeCovariates(y)


def _words_from_log_probs(log_probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cumulative = np.cumsum(np.exp(log_probs), axis=-1)
    idx = (u[..., None] >= cumulative).sum(axis=-1)
    return np.minimum(idx, log_probs.shape[-1] - 1)


def sample_er_covariates(model: CovariateModel, cov: EdgeCovariates, seed: int) -> MultiplexGraph:
    if cov.d != model.d:
        raise ModelDimensionError(f"covariates have d={cov.d}, model expects d={model.d}")
    eta = model.mu[None, None, :] + cov.y @ model.beta.T
    logits = np.concatenate([np.zeros((cov.n, cov.n, 1)), eta], axis=2)
    words = _words_from_log_probs(log_softmax(logits, axis=2), _pair_uniforms(cov.n, seed))
    return MultiplexGraph(words, model.K)


def sample_sbm_covariates(
    theta: CovariateBlockParameters, cov: EdgeCovariates, seed: int
) -> Tuple[MultiplexGraph, np.ndarray]:
    n = cov.n
    z = sample_labels(theta.alpha, n, seed)
    u = _pair_uniforms(n, seed)
    words = np.zeros((n, n), dtype=np.int64)
    for q in range(theta.Q):
        for l in range(theta.Q):
            cell = (z[:, None] == q) & (z[None, :] == l)
            if cell.any():
                log_probs = theta.cell_log_probs(cov, q, l)[cell]
                words[cell] = _words_from_log_probs(log_probs, u[cell])
    return MultiplexGraph(words, theta.K), z


GenerativeParameters = Union[ErParameters, BlockParameters, CovariateModel, CovariateBlockParameters]


@dataclass
class SimulationResult:
    graph: MultiplexGraph
    z: Optional[np.ndarray]
    covariates: Optional[EdgeCovariates]


@dataclass(frozen=True)
class SimulationSpec:
    """
    What to simulate: n, seed and exactly one generative parameter set.

    Covariate models additionally need covariate_dim; covariates are drawn
    standard normal scaled by covariate_scale.
    """

    n: int
    seed: int
    params: GenerativeParameters
    covariate_dim: int = 0
    covariate_scale: float = 1.0

    def __post_init__(self):
        if int(self.n) < 2:
            raise SimulationSpecError(f"n must be >= 2, got {self.n}")
        if not 0 <= int(self.seed) < SEED_LIMIT:
            raise SimulationSpecError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if isinstance(self.params, (CovariateModel, CovariateBlockParameters)):
            if self.params.d != self.covariate_dim:
                raise SimulationSpecError(
                    f"covariate_dim={self.covariate_dim} but the model expects d={self.params.d}"
                )

    @property
    def K(self) -> int:
        return self.params.K

    def run(self) -> SimulationResult:
        logger.info("simulating %s with n=%d seed=%d", type(self.params).__name__, self.n, self.seed)
        p = self.params
        if isinstance(p, ErParameters):
            return SimulationResult(sample_er(p, self.n, p.K, self.seed), None, None)
        if isinstance(p, BlockParameters):
            g, z = sample_sbm(p, self.n, self.seed)
            return SimulationResult(g, z, None)
        cov = sample_covariates(self.n, self.covariate_dim, self.seed, self.covariate_scale)
        if isinstance(p, CovariateModel):
            return SimulationResult(sample_er_covariates(p, cov, self.seed), None, cov)
        g, z = sample_sbm_covariates(p, cov, self.seed)
        return SimulationResult(g, z, cov)

    def to_dict(self) -> Dict[str, Any]:
        kinds = {
            ErParameters: "er",
            BlockParameters: "sbm",
            CovariateModel: "er_covariates",
            CovariateBlockParameters: "sbm_covariates",
        }
        return {
            "n": int(self.n),
            "seed": int(self.seed),
            "model": kinds[type(self.params)],
            "params": self.params.to_dict(),
            "covariate_dim": int(self.covariate_dim),
            "covariate_scale": float(self.covariate_scale),
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "SimulationSpec":
        loaders = {
            "er": ErParameters.from_dict,
            "sbm": BlockParameters.from_dict,
            "er_covariates": CovariateModel.from_dict,
            "sbm_covariates": CovariateBlockParameters.from_dict,
        }
        kind = payload.get("model")
        if kind not in loaders:
            raise SimulationSpecError(f"model must be one of {sorted(loaders)}, got {kind!r}")
        missing = [k for k in ("n", "seed", "params") if k not in payload]
        if missing:
            raise SimulationSpecError(f"simulation spec missing keys: {missing}")
        params = loaders[kind](payload["params"])
        covariate_dim = int(payload.get("covariate_dim", getattr(params, "d", 0)))
        return cls(
            n=int(payload["n"]),
            seed=int(payload["seed"]),
            params=params,
            covariate_dim=covariate_dim,
            covariate_scale=float(payload.get("covariate_scale", 1.0)),
        )
