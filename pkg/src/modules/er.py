"""
Multiplex Erdos-Renyi baseline
==============================
Every ordered pair draws its edge word independently from one distribution pi
over the 2^K words. The closed-form MLE is the empirical word frequency; the
covariate extension makes pi depend on a pair covariate vector through a
multinomial logit with the all-zeros word as base category.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
from scipy.special import softmax

from src.models.fit_config import NewtonConfig
from src.modules.graph import EdgeCovariates, MultiplexGraph, word_counts
from src.modules.logit import fit_multinomial_logit
from src.modules.model import ModelDimensionError, check_simplex, frozen_array, layers_from_words, safe_log

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ErParameters:
    pi: np.ndarray

    def __post_init__(self):
        pi = frozen_array(self.pi)
        if pi.ndim != 1:
            raise ModelDimensionError(f"pi must be a vector over words, got shape {pi.shape}")
        layers_from_words(pi.size)
        check_simplex(pi, 0, "pi")
        object.__setattr__(self, "pi", pi)

    @property
    def K(self) -> int:
        return layers_from_words(self.pi.size)

    def to_dict(self) -> Dict[str, Any]:
        return {"K": self.K, "pi": self.pi.tolist()}

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "ErParameters":
        return cls(pi=payload["pi"])


@dataclass(frozen=True, eq=False)
class CovariateModel:
    """
    Multinomial logit over words: mu has shape (2^K - 1,), beta (2^K - 1, d).

    Standard errors and Newton diagnostics are filled in by fit_er_covariates
    and stay None for hand-built models.
    """

    mu: np.ndarray
    beta: np.ndarray
    mu_stderr: Optional[np.ndarray] = None
    beta_stderr: Optional[np.ndarray] = None
    iterations: int = 0
    grad_norm: float = 0.0
    converged: bool = True
    flags: Tuple[str, ...] = ()

    def __post_init__(self):
        mu = frozen_array(self.mu)
        if mu.ndim != 1:
            raise ModelDimensionError(f"mu must be a vector, got shape {mu.shape}")
        layers_from_words(mu.size + 1)
        beta = np.asarray(self.beta, dtype=float)
        if beta.size == 0:
            beta = np.zeros((mu.size, 0))
        beta = frozen_array(beta)
        if beta.ndim != 2 or beta.shape[0] != mu.size:
            raise ModelDimensionError(f"beta must have shape ({mu.size}, d), got {beta.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(beta))):
            raise ModelDimensionError("mu and beta must be finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "flags", tuple(self.flags))

    @property
    def K(self) -> int:
        return layers_from_words(self.mu.size + 1)

    @property
    def d(self) -> int:
        return self.beta.shape[1]

    @property
    def coef(self) -> np.ndarray:
        return np.hstack([self.mu[:, None], self.beta])

    def to_dict(self) -> Dict[str, Any]:
        out = {
            "K": self.K,
            "d": self.d,
            "mu": self.mu.tolist(),
            "beta": self.beta.tolist(),
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "converged": self.converged,
            "flags": list(self.flags),
        }
        if self.mu_stderr is not None:
            out["mu_stderr"] = np.asarray(self.mu_stderr).tolist()
            out["beta_stderr"] = np.asarray(self.beta_stderr).tolist()
        return out

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "CovariateModel":
        return cls(mu=payload["mu"], beta=payload.get("beta") or [])


def fit_er(g: MultiplexGraph) -> ErParameters:
    counts = word_counts(g)
    return ErParameters(counts / (g.n * (g.n - 1)))


def er_log_likelihood(g: MultiplexGraph, params: ErParameters) -> float:
    if params.K != g.K:
        raise ModelDimensionError(f"parameters have K={params.K} but graph has K={g.K}")
    counts = word_counts(g)
    return float(np.dot(counts, safe_log(params.pi)))


def er_word_prob(model: CovariateModel, y) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != (model.d,):
        raise ModelDimensionError(f"covariate vector must have length {model.d}, got shape {y.shape}")
    eta = model.mu + model.beta @ y
    return softmax(np.concatenate([[0.0], eta]))


def intercept_start(frequencies: np.ndarray) -> np.ndarray:
    """Logit transform of word frequencies against the all-zeros word."""
    log_freq = safe_log(frequencies)
    return log_freq[1:] - log_freq[0]


def fit_er_covariates(
    g: MultiplexGraph,
    cov: EdgeCovariates,
    config: NewtonConfig = NewtonConfig(),
) -> CovariateModel:
    """
    Maximum-likelihood multinomial logit of pair words on pair covariates.

    Starts at the logit of the empirical word frequencies with beta = 0. Raises
    LogitConvergenceError (carrying the last iterate) when Newton does not
    reach the gradient tolerance.
    """
    if cov.n != g.n:
        raise ModelDimensionError(f"covariates cover {cov.n} nodes but graph has {g.n}")
    X = cov.design_matrix()
    labels = g.words[g.offdiag].astype(np.int64)
    W = g.n_words

    init = np.zeros((W - 1, 1 + cov.d))
    init[:, 0] = intercept_start(fit_er(g).pi)

    fit = fit_multinomial_logit(X, labels, W, init=init, config=config)
    stderr = fit.stderr
    logger.info(
        "er covariate fit: K=%d d=%d iterations=%d grad_norm=%.3g",
        g.K, cov.d, fit.iterations, fit.grad_norm,
    )
    return CovariateModel(
        mu=fit.coef[:, 0],
        beta=fit.coef[:, 1:],
        mu_stderr=stderr[:, 0],
        beta_stderr=stderr[:, 1:],
        iterations=fit.iterations,
        grad_norm=fit.grad_norm,
        converged=fit.converged,
        flags=("quasi_separation",) if fit.separated else (),
    )
