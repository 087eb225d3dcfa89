"""
Exact enumeration oracle for small instances.

Assignments are enumerated in mixed-radix order (node 0 is the least
significant digit). A chunk holds every assignment of the low nodes for one
setting of the high ones, at most CHUNK_SIZE rows; consecutive chunks differ
in one high digit plus any carries, and their scores are updated from the
previous chunk rather than recomputed. Each chunk is reduced with
log-sum-exp and the chunk results are reduced again in chunk order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Iterator, Tuple

import numpy as np
from scipy.special import logsumexp

from src.config import ORACLE_MAX_ASSIGNMENTS, POSTERIOR_MAX_ASSIGNMENTS
from src.modules.graph import MultiplexGraph
from src.modules.model import BlockParameters, ModelDimensionError, safe_log
from src.modules.simulate import STREAM_MONTE_CARLO, make_rng
from src.modules.vem import elbo

logger = logging.getLogger(__name__)

CHUNK_SIZE = 4096


class OracleSizeError(ValueError):
    pass


@dataclass
class ExactPosterior:
    assignments: np.ndarray  # (Q^n, n)
    probabilities: np.ndarray
    marginals: np.ndarray  # (n, Q)
    log_likelihood: float

    @property
    def mode(self) -> np.ndarray:
        return self.assignments[int(np.argmax(self.probabilities))]


@dataclass
class KlDecomposition:
    elbo: float
    log_likelihood: float
    kl: float
    residual: float


def _guard(g: MultiplexGraph, theta: BlockParameters, limit: int) -> int:
    if theta.K != g.K:
        raise ModelDimensionError(f"theta has K={theta.K} but graph has K={g.K}")
    total = theta.Q ** g.n
    if total > limit:
        raise OracleSizeError(f"Q^n = {theta.Q}^{g.n} = {total} assignments exceeds the limit {limit}")
    return total


def _decode(indices: np.ndarray, n: int, Q: int) -> np.ndarray:
    return (indices[:, None] // (Q ** np.arange(n, dtype=np.int64))[None, :]) % Q


def _complete_scores(g: MultiplexGraph, theta: BlockParameters, z: np.ndarray) -> np.ndarray:
    """complete_log_likelihood for every row of z."""
    log_pi = safe_log(theta.pi)
    words = g.words.astype(np.int64)
    pair = log_pi[z[:, :, None], z[:, None, :], words[None, :, :]]
    pair = np.where(g.offdiag[None, :, :], pair, 0.0)
    return pair.sum(axis=(1, 2)) + safe_log(theta.alpha)[z].sum(axis=1)


class _OdometerScores:
    """
    Complete log-likelihoods of every assignment, one chunk at a time.

    The low nodes vary inside a chunk and their score table is built once.
    The remaining nodes are walked like an odometer: level k holds the terms
    of digits k and above, so a step recomputes only the levels whose digit
    moved, at O(Q^m) for the chunk vector plus O(n) for the scalar part.
    Each level is summed from its parent in a fixed order, so a chunk's
    scores depend only on its digits and not on the path that reached them.
    """

    def __init__(self, g: MultiplexGraph, theta: BlockParameters):
        n, Q = g.n, theta.Q
        m = 0
        while m < n and Q ** (m + 1) <= CHUNK_SIZE:
            m += 1
        self.n, self.Q, self.m = n, Q, m

        log_pi = safe_log(theta.pi)
        ordered = log_pi[:, :, g.words.astype(np.int64)].transpose(2, 3, 0, 1).copy()
        ordered[np.arange(n), np.arange(n)] = 0.0
        # pair[i, j, a, b]: both directed words between i (block a) and j (block b)
        self.pair = ordered + ordered.transpose(1, 0, 3, 2)
        self.log_alpha = safe_log(theta.alpha)

        self.low = _decode(np.arange(Q ** m, dtype=np.int64), m, Q)
        low_score = self.log_alpha[self.low].sum(axis=1)
        for j, k in combinations(range(m), 2):
            low_score += self.pair[j, k][self.low[:, j], self.low[:, k]]
        self.low_score = low_score

        # cross[i - m, b]: terms between high node i in block b and every low node
        self.cross = np.zeros((n - m, Q, Q ** m))
        for i in range(m, n):
            for j in range(m):
                self.cross[i - m] += self.pair[i, j][:, self.low[:, j]]

    def _advance(self, digits: np.ndarray) -> int:
        p = 0
        while digits[p] == self.Q - 1:
            digits[p] = 0
            p += 1
        digits[p] += 1
        return p

    def _refresh(self, digits: np.ndarray, cross: np.ndarray, const: np.ndarray, top: int) -> None:
        h = self.n - self.m
        for k in range(top, -1, -1):
            b = digits[k]
            upper = self.m + np.arange(k + 1, h)
            cross[k] = cross[k + 1] + self.cross[k, b]
            among_high = self.pair[self.m + k, upper, b, digits[k + 1 :]].sum()
            const[k] = const[k + 1] + self.log_alpha[b] + among_high

    def chunks(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        h = self.n - self.m
        digits = np.zeros(h, dtype=np.int64)
        cross = np.zeros((h + 1, self.low_score.size))
        const = np.zeros(h + 1)
        self._refresh(digits, cross, const, h - 1)
        for chunk in range(self.Q ** h):
            if chunk:
                self._refresh(digits, cross, const, self._advance(digits))
            z = np.empty((self.low.shape[0], self.n), dtype=np.int64)
            z[:, : self.m] = self.low
            z[:, self.m :] = digits
            yield z, self.low_score + cross[0] + const[0]


def _chunks(g: MultiplexGraph, theta: BlockParameters) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    return _OdometerScores(g, theta).chunks()


def exact_log_likelihood(g: MultiplexGraph, theta: BlockParameters) -> float:
    """log sum_z exp(complete_log_likelihood(g, z, theta)) by full enumeration."""
    _guard(g, theta, ORACLE_MAX_ASSIGNMENTS)
    partial = [logsumexp(scores) for _, scores in _chunks(g, theta)]
    return float(logsumexp(partial))


def exact_posterior(g: MultiplexGraph, theta: BlockParameters) -> ExactPosterior:
    _guard(g, theta, POSTERIOR_MAX_ASSIGNMENTS)
    assignments = []
    scores = []
    for z, s in _chunks(g, theta):
        assignments.append(z)
        scores.append(s)
    z_all = np.vstack(assignments)
    s_all = np.concatenate(scores)
    log_l = float(logsumexp(s_all))
    probs = np.exp(s_all - log_l)
    marginals = np.zeros((g.n, theta.Q))
    for q in range(theta.Q):
        marginals[:, q] = probs @ (z_all == q)
    return ExactPosterior(assignments=z_all, probabilities=probs, marginals=marginals, log_likelihood=log_l)


def kl_decomposition_check(g: MultiplexGraph, tau: np.ndarray, theta: BlockParameters) -> KlDecomposition:
    """
    log L = elbo + KL(R_tau || posterior), with R_tau the product of tau rows.

    residual = |log L - elbo - KL|; it only reflects floating-point error.
    """
    tau = np.asarray(tau, dtype=float)
    post = exact_posterior(g, theta)
    value = elbo(g, tau, theta)

    with np.errstate(divide="ignore"):
        log_tau = np.log(tau)
    rows = np.arange(g.n)[None, :]
    log_r = log_tau[rows, post.assignments].sum(axis=1)
    r = np.exp(log_r)
    log_p = np.log(np.maximum(post.probabilities, np.finfo(float).tiny))
    support = r > 0
    kl = float(np.sum(r[support] * (log_r[support] - log_p[support])))

    residual = abs(post.log_likelihood - value - kl)
    return KlDecomposition(elbo=value, log_likelihood=post.log_likelihood, kl=kl, residual=residual)


def monte_carlo_log_likelihood(
    g: MultiplexGraph, theta: BlockParameters, draws: int, seed: int
) -> Tuple[float, float]:
    """
    Estimate log L by averaging p(X | Z) over prior draws of Z.

    Returns the estimate and its delta-method standard error on the log scale.
    """
    if theta.K != g.K:
        raise ModelDimensionError(f"theta has K={theta.K} but graph has K={g.K}")
    rng = make_rng(seed, STREAM_MONTE_CARLO)
    cumulative = np.cumsum(theta.alpha)
    log_weights = []
    for start in range(0, draws, CHUNK_SIZE):
        size = min(CHUNK_SIZE, draws - start)
        z = np.minimum(np.searchsorted(cumulative, rng.random((size, g.n)), side="right"), theta.Q - 1)
        log_weights.append(_complete_scores(g, theta, z) - safe_log(theta.alpha)[z].sum(axis=1))
    lw = np.concatenate(log_weights)
    shift = lw.max()
    w = np.exp(lw - shift)
    mean = w.mean()
    estimate = float(shift + np.log(mean))
    stderr = float(w.std(ddof=1) / np.sqrt(lw.size) / mean) if lw.size > 1 else float("inf")
    return estimate, stderr
