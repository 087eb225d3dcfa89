"""
Block model parameters and exact identities
===========================================
theta = (alpha, pi): block-membership probabilities and, for every ordered
block pair (q, l), a distribution over the 2^K edge words.

Conventions:
- block labels are 0-based; layers are 1-based (layer k is bit k-1)
- probabilities entering a log are clamped from below at PROB_FLOOR and never
  from above: a zero-count word times its floored log is exactly 0, and a
  probability of 1 keeps log 1 = 0
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import log_softmax

from src.config import IDENTIFIABILITY_TOL, INDEPENDENCE_TOL, MAX_LAYERS, PROB_FLOOR, SIMPLEX_TOL
from src.modules.graph import EdgeCovariates, MultiplexGraph, word_bits

logger = logging.getLogger(__name__)


class ModelDimensionError(ValueError):
    pass


class UnsupportedLayerCountError(ValueError):
    pass


class ConditioningError(ValueError):
    pass


def safe_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(np.asarray(p, dtype=float), PROB_FLOOR))


def layers_from_words(n_words: int) -> int:
    K = int(n_words).bit_length() - 1
    if n_words < 2 or 2 ** K != n_words or K > MAX_LAYERS:
        raise ModelDimensionError(f"word dimension must be 2^K with 1 <= K <= {MAX_LAYERS}, got {n_words}")
    return K


def check_simplex(values: np.ndarray, axis: int, name: str) -> None:
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise ModelDimensionError(f"{name} entries must be finite and >= 0")
    sums = values.sum(axis=axis)
    if np.any(np.abs(sums - 1.0) > SIMPLEX_TOL):
        raise ModelDimensionError(f"{name} must sum to 1 (max deviation {np.abs(sums - 1.0).max():.3g})")


def frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class BlockParameters:
    """theta = (alpha, pi); pi has shape (Q, Q, 2^K)."""

    alpha: np.ndarray
    pi: np.ndarray
    flags: Tuple[str, ...] = ()

    def __post_init__(self):
        alpha = frozen_array(self.alpha)
        pi = frozen_array(self.pi)
        if alpha.ndim != 1 or alpha.size < 1:
            raise ModelDimensionError(f"alpha must be a non-empty vector, got shape {alpha.shape}")
        Q = alpha.size
        if pi.ndim != 3 or pi.shape[:2] != (Q, Q):
            raise ModelDimensionError(f"pi must have shape ({Q}, {Q}, 2^K), got {pi.shape}")
        layers_from_words(pi.shape[2])
        check_simplex(alpha, 0, "alpha")
        check_simplex(pi, 2, "pi")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "flags", tuple(self.flags))

    @property
    def Q(self) -> int:
        return self.alpha.size

    @property
    def K(self) -> int:
        return layers_from_words(self.pi.shape[2])

    def to_dict(self) -> Dict[str, Any]:
        return {"Q": self.Q, "K": self.K, "alpha": self.alpha.tolist(), "pi": self.pi.tolist()}

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "BlockParameters":
        theta = cls(alpha=payload["alpha"], pi=payload["pi"])
        if "Q" in payload and int(payload["Q"]) != theta.Q:
            raise ModelDimensionError(f"declared Q={payload['Q']} but alpha has {theta.Q} entries")
        if "K" in payload and int(payload["K"]) != theta.K:
            raise ModelDimensionError(f"declared K={payload['K']} but pi has {theta.pi.shape[2]} words")
        return theta


@dataclass(frozen=True, eq=False)
class CovariateBlockParameters:
    """
    Covariate SBM: alpha plus per-cell multinomial-logit coefficients.

    mu has shape (Q, Q, 2^K - 1) and beta (Q, Q, 2^K - 1, d); the all-zeros
    word is the base category. The optional standard errors come from the
    weighted observed information of each cell's fit and share those shapes;
    cells without a Newton fit carry NaN.
    """

    alpha: np.ndarray
    mu: np.ndarray
    beta: np.ndarray
    flags: Tuple[str, ...] = ()
    mu_stderr: Optional[np.ndarray] = None
    beta_stderr: Optional[np.ndarray] = None

    def __post_init__(self):
        alpha = frozen_array(self.alpha)
        mu = frozen_array(self.mu)
        beta = frozen_array(self.beta)
        Q = alpha.size
        check_simplex(alpha, 0, "alpha")
        if mu.ndim != 3 or mu.shape[:2] != (Q, Q):
            raise ModelDimensionError(f"mu must have shape ({Q}, {Q}, 2^K-1), got {mu.shape}")
        layers_from_words(mu.shape[2] + 1)
        if beta.ndim != 4 or beta.shape[:3] != mu.shape:
            raise ModelDimensionError(f"beta must have shape {mu.shape + ('d',)}, got {beta.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(beta))):
            raise ModelDimensionError("mu and beta must be finite")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "flags", tuple(self.flags))
        if (self.mu_stderr is None) != (self.beta_stderr is None):
            raise ModelDimensionError("mu_stderr and beta_stderr must be given together")
        if self.mu_stderr is not None:
            mu_stderr = frozen_array(self.mu_stderr)
            beta_stderr = frozen_array(self.beta_stderr)
            if mu_stderr.shape != mu.shape or beta_stderr.shape != beta.shape:
                raise ModelDimensionError("standard errors must match the shapes of mu and beta")
            object.__setattr__(self, "mu_stderr", mu_stderr)
            object.__setattr__(self, "beta_stderr", beta_stderr)

    @property
    def Q(self) -> int:
        return self.alpha.size

    @property
    def K(self) -> int:
        return layers_from_words(self.mu.shape[2] + 1)

    @property
    def d(self) -> int:
        return self.beta.shape[3]

    @property
    def n_free_parameters(self) -> int:
        return int(self.mu.size + self.beta.size)

    def cell_log_probs(self, cov: EdgeCovariates, q: int, l: int) -> np.ndarray:
        """(n, n, 2^K) log word probabilities for block pair (q, l)."""
        if cov.d != self.d:
            raise ModelDimensionError(f"covariate dimension {cov.d} != model dimension {self.d}")
        eta = self.mu[q, l][None, None, :] + cov.y @ self.beta[q, l].T
        logits = np.concatenate([np.zeros(eta.shape[:2] + (1,)), eta], axis=2)
        return log_softmax(logits, axis=2)

    def pair_log_probs(self, g: MultiplexGraph, cov: EdgeCovariates) -> np.ndarray:
        """L[i, j, q, l] = log P(word(i, j) | Z_i=q, Z_j=l, y_ij); diagonal is 0."""
        if g.K != self.K or cov.n != g.n:
            raise ModelDimensionError("graph, covariates and parameters disagree on n or K")
        words = g.words.astype(np.int64)[:, :, None]
        out = np.zeros((g.n, g.n, self.Q, self.Q))
        for q in range(self.Q):
            for l in range(self.Q):
                lp = np.take_along_axis(self.cell_log_probs(cov, q, l), words, axis=2)[:, :, 0]
                out[:, :, q, l] = np.where(g.offdiag, lp, 0.0)
        return out

    def to_dict(self) -> Dict[str, Any]:
        out = {
            "Q": self.Q,
            "K": self.K,
            "d": self.d,
            "alpha": self.alpha.tolist(),
            "mu": self.mu.tolist(),
            "beta": self.beta.tolist(),
        }
        if self.mu_stderr is not None:
            out.update(mu_stderr=self.mu_stderr.tolist(), beta_stderr=self.beta_stderr.tolist())
        return out

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "CovariateBlockParameters":
        mu = np.asarray(payload["mu"], dtype=float)
        beta = np.asarray(payload.get("beta") or [], dtype=float)
        if beta.size == 0:
            beta = np.zeros(mu.shape + (0,))
        mu_stderr = payload.get("mu_stderr")
        beta_stderr = payload.get("beta_stderr")
        if mu_stderr is not None:
            mu_stderr = np.asarray(mu_stderr, dtype=float)
            beta_stderr = np.asarray(beta_stderr, dtype=float).reshape(beta.shape)
        return cls(alpha=payload["alpha"], mu=mu, beta=beta, mu_stderr=mu_stderr, beta_stderr=beta_stderr)


@dataclass
class IdentifiabilityReport:
    ok: bool
    r: np.ndarray
    offending: List[Tuple[int, int, int]] = field(default_factory=list)
    reasons: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ok": self.ok,
            "status": "PASS" if self.ok else "FAIL",
            "offending": [list(t) for t in self.offending],
            "reasons": list(self.reasons),
        }


def check_assignment(z: Sequence[int], n: int, Q: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.int64)
    if z.shape != (n,):
        raise ModelDimensionError(f"assignment must have length {n}, got shape {z.shape}")
    if z.size and (z.min() < 0 or z.max() >= Q):
        raise ModelDimensionError(f"block labels must lie in [0, {Q})")
    return z


def _check_compatible(g: MultiplexGraph, theta: BlockParameters) -> None:
    if theta.K != g.K:
        raise ModelDimensionError(f"theta has K={theta.K} but graph has K={g.K}")


def complete_log_likelihood(g: MultiplexGraph, z: Sequence[int], theta: BlockParameters) -> float:
    _check_compatible(g, theta)
    z = check_assignment(z, g.n, theta.Q)
    log_pi = safe_log(theta.pi)
    pair_terms = log_pi[z[:, None], z[None, :], g.words.astype(np.int64)]
    return float(pair_terms[g.offdiag].sum() + safe_log(theta.alpha)[z].sum())


def _cell_layers(pi_cell: Sequence[float]) -> Tuple[np.ndarray, int]:
    cell = np.asarray(pi_cell, dtype=float)
    if cell.ndim != 1:
        raise ModelDimensionError("pi_cell must be a vector over words")
    return cell, layers_from_words(cell.size)


def _check_cell_layer(k: int, K: int) -> None:
    if not 1 <= int(k) <= K:
        raise ModelDimensionError(f"layer must be in [1, {K}], got {k}")


def marginal_layer_prob(pi_cell: Sequence[float], k: int) -> float:
    cell, K = _cell_layers(pi_cell)
    _check_cell_layer(k, K)
    return float(cell[word_bits(K)[:, k - 1] == 1].sum())


def conditional_layer_prob(
    pi_cell: Sequence[float], k: int, value: int, given: Mapping[int, int]
) -> float:
    """P(X^k = value | X^m = given[m] for m in given), by ratio of word masses."""
    cell, K = _cell_layers(pi_cell)
    _check_cell_layer(k, K)
    if int(k) in given:
        raise ConditioningError(f"layer {k} cannot be both target and conditioning layer")
    bits = word_bits(K)
    match = np.ones(cell.size, dtype=bool)
    for layer, layer_value in given.items():
        _check_cell_layer(layer, K)
        match &= bits[:, layer - 1] == int(layer_value)
    mass = cell[match].sum()
    if mass <= 0:
        raise ConditioningError(f"conditioning event {dict(given)} has probability 0")
    return float(cell[match & (bits[:, k - 1] == int(value))].sum() / mass)


def is_independent(pi_cell: Sequence[float], tol: float = INDEPENDENCE_TOL) -> bool:
    cell, K = _cell_layers(pi_cell)
    if K != 2:
        raise UnsupportedLayerCountError(f"independence test is defined for K=2, got K={K}")
    return bool(abs(cell[0] * cell[3] - cell[1] * cell[2]) <= tol)


def count_parameters(Q: int, K: int) -> int:
    return (2 ** K - 1) * Q * Q + (Q - 1)


def check_identifiability(theta: BlockParameters, tol: float = IDENTIFIABILITY_TOL) -> IdentifiabilityReport:
    """r_q^(w) = sum_l pi_ql^(w) alpha_l must have pairwise distinct coordinates for every w."""
    r = np.einsum("qlw,l->wq", theta.pi, theta.alpha)
    reasons = []
    offending = []

    small = np.flatnonzero(theta.alpha <= tol)
    if small.size:
        reasons.append(f"alpha_not_positive:{','.join(str(q) for q in small)}")

    for q, q2 in combinations(range(theta.Q), 2):
        close = np.flatnonzero(np.abs(r[:, q] - r[:, q2]) <= tol)
        offending.extend((int(w), q, q2) for w in close)
    if offending:
        reasons.append(f"r_coordinates_not_distinct:{len(offending)}")

    return IdentifiabilityReport(ok=not reasons, r=r, offending=offending, reasons=reasons)


def permute_blocks(theta: BlockParameters, sigma: Sequence[int]) -> BlockParameters:
    """New parameters whose block a is block sigma[a] of theta."""
    sigma = np.asarray(sigma, dtype=np.int64)
    if sorted(sigma.tolist()) != list(range(theta.Q)):
        raise ModelDimensionError("sigma must be a permutation of range(Q)")
    return BlockParameters(theta.alpha[sigma], theta.pi[np.ix_(sigma, sigma)], theta.flags)


def connection_profile(theta: BlockParameters, tol: float = INDEPENDENCE_TOL) -> pd.DataFrame:
    """
    Per block pair and layer: marginal connection probability and, for K=2,
    the probability conditional on absence / presence of the other layer.
    """
    K = theta.K
    rows = []
    for q in range(theta.Q):
        for l in range(theta.Q):
            cell = theta.pi[q, l]
            for k in range(1, K + 1):
                row = {
                    "source_block": q,
                    "target_block": l,
                    "layer": k,
                    "marginal": marginal_layer_prob(cell, k),
                    "given_other_absent": np.nan,
                    "given_other_present": np.nan,
                    "independent": np.nan,
                }
                if K == 2:
                    other = 2 if k == 1 else 1
                    for label, other_value in (("given_other_absent", 0), ("given_other_present", 1)):
                        try:
                            row[label] = conditional_layer_prob(cell, k, 1, {other: other_value})
                        except ConditioningError:
                            row[label] = np.nan
                    row["independent"] = is_independent(cell, tol)
                rows.append(row)
    return pd.DataFrame(rows)


def uniform_parameters(Q: int, K: int) -> BlockParameters:
    return BlockParameters(np.full(Q, 1.0 / Q), np.full((Q, Q, 2 ** K), 1.0 / 2 ** K))


def random_parameters(Q: int, K: int, rng: np.random.Generator, concentration: float = 1.0) -> BlockParameters:
    alpha = rng.dirichlet(np.full(Q, concentration))
    pi = rng.dirichlet(np.full(2 ** K, concentration), size=(Q, Q))
    return BlockParameters(alpha, pi)


def planted_parameters(
    Q: int,
    K: int,
    within: Optional[Sequence[float]] = None,
    between: Optional[Sequence[float]] = None,
) -> BlockParameters:
    """Equal-size blocks with one word distribution inside blocks and another across."""
    W = 2 ** K
    if within is None:
        within = np.full(W, 0.6)
        within[:-1] = 0.4 / (W - 1)
    if between is None:
        between = np.full(W, 0.8)
        between[1:] = 0.2 / (W - 1)
    pi = np.empty((Q, Q, W))
    pi[:] = np.asarray(between, dtype=float)
    for q in range(Q):
        pi[q, q] = np.asarray(within, dtype=float)
    return BlockParameters(np.full(Q, 1.0 / Q), pi)
