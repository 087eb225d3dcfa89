"""
Weighted multinomial logit with a base category, fitted by Newton-Raphson.

Category 0 is the base (logit fixed at 0). Coefficients have shape (C-1, p)
for C categories and p design columns; the first design column is usually
the intercept.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import log_softmax, logsumexp

from src.models.fit_config import NewtonConfig

logger = logging.getLogger(__name__)

LOGLIK_SLACK = 1e-12  # relative; absorbs rounding in step acceptance


class QuasiSeparationWarning(UserWarning):
    pass


@dataclass
class LogitFit:
    coef: np.ndarray
    loglik: float
    grad_norm: float
    iterations: int
    converged: bool
    information: np.ndarray
    loglik_trace: List[float] = field(default_factory=list)
    separated: bool = False

    @property
    def stderr(self) -> np.ndarray:
        """Observed-information standard errors, shaped like coef."""
        try:
            cov = np.linalg.inv(self.information)
            diag = np.clip(np.diag(cov), 0.0, None)
        except np.linalg.LinAlgError:
            diag = np.full(self.information.shape[0], np.inf)
        return np.sqrt(diag).reshape(self.coef.shape)


class LogitConvergenceError(RuntimeError):
    def __init__(self, message: str, fit: LogitFit):
        super().__init__(message)
        self.fit = fit


def log_category_probabilities(X: np.ndarray, coef: np.ndarray) -> np.ndarray:
    eta = X @ coef.T
    logits = np.hstack([np.zeros((eta.shape[0], 1)), eta])
    return log_softmax(logits, axis=1)


def multinomial_loglik(X: np.ndarray, labels: np.ndarray, weights: np.ndarray, coef: np.ndarray) -> float:
    eta = X @ coef.T
    logits = np.hstack([np.zeros((eta.shape[0], 1)), eta])
    chosen = np.take_along_axis(logits, labels[:, None], axis=1)[:, 0]
    return float(np.dot(weights, chosen - logsumexp(logits, axis=1)))


def _gradient(X, labels, weights, probs) -> np.ndarray:
    resid = -probs[:, 1:]
    hit = labels > 0
    resid[np.flatnonzero(hit), labels[hit] - 1] += 1.0
    return (resid * weights[:, None]).T @ X


def _information(X, weights, probs) -> np.ndarray:
    m, p = X.shape
    c1 = probs.shape[1] - 1
    P = probs[:, 1:]
    info = np.empty((c1, p, c1, p))
    for c in range(c1):
        for d in range(c, c1):
            w = -P[:, c] * P[:, d]
            if c == d:
                w = w + P[:, c]
            block = X.T @ (X * (weights * w)[:, None])
            info[c, :, d, :] = block
            info[d, :, c, :] = block.T
    return info.reshape(c1 * p, c1 * p)


def _solve(info: np.ndarray, grad: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(info, grad)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(info, grad, rcond=None)[0]


def fit_multinomial_logit(
    X: np.ndarray,
    labels: np.ndarray,
    n_categories: int,
    weights: Optional[np.ndarray] = None,
    init: Optional[np.ndarray] = None,
    config: NewtonConfig = NewtonConfig(),
    raise_on_failure: bool = True,
) -> LogitFit:
    """
    Maximise sum_m w_m log P(labels[m] | X[m]) by Newton-Raphson with step halving.

    Converged when the gradient infinity-norm drops below the configured
    tolerance. A parameter infinity-norm above the separation cap raises a
    QuasiSeparationWarning once.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    coef = np.zeros((n_categories - 1, X.shape[1])) if init is None else np.array(init, dtype=float)

    loglik = multinomial_loglik(X, labels, weights, coef)
    trace = [loglik]
    separated = False
    converged = False
    iterations = 0

    while True:
        probs = np.exp(log_category_probabilities(X, coef))
        grad = _gradient(X, labels, weights, probs)
        grad_norm = float(np.abs(grad).max()) if grad.size else 0.0
        info = _information(X, weights, probs)
        if grad_norm < config.gradient_tolerance:
            converged = True
            break
        if iterations >= config.max_iterations:
            break

        step = _solve(info, grad.ravel()).reshape(coef.shape)
        t = 1.0
        accepted = False
        for _ in range(config.max_halvings + 1):
            candidate = coef + t * step
            cand_ll = multinomial_loglik(X, labels, weights, candidate)
            if cand_ll >= loglik - LOGLIK_SLACK * max(1.0, abs(loglik)):
                accepted = True
                break
            t /= 2.0
        if not accepted:
            logger.debug("newton stalled at iteration %d, grad_norm=%.3g", iterations, grad_norm)
            break

        coef, loglik = candidate, cand_ll
        trace.append(loglik)
        iterations += 1

        if not separated and np.abs(coef).max() > config.separation_cap:
            separated = True
            msg = f"parameter norm {np.abs(coef).max():.1f} exceeds {config.separation_cap}: quasi-separation"
            warnings.warn(msg, QuasiSeparationWarning, stacklevel=2)
            logger.warning(msg)

    fit = LogitFit(
        coef=coef,
        loglik=loglik,
        grad_norm=grad_norm,
        iterations=iterations,
        converged=converged,
        information=info,
        loglik_trace=trace,
        separated=separated,
    )
    if not converged and raise_on_failure:
        raise LogitConvergenceError(
            f"newton did not converge after {iterations} iterations (grad_norm={grad_norm:.3g})", fit
        )
    return fit
