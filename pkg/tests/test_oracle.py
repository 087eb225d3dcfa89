import math

import numpy as np
import pytest

from src.modules import oracle
from src.modules.graph import MultiplexGraph
from src.modules.model import (
    BlockParameters,
    complete_log_likelihood,
    permute_blocks,
    random_parameters,
)
from src.modules.oracle import (
    OracleSizeError,
    exact_log_likelihood,
    exact_posterior,
    kl_decomposition_check,
    monte_carlo_log_likelihood,
)
from src.modules.vem import elbo


def _random_graph(n, K, seed):
    rng = np.random.default_rng(seed)
    return MultiplexGraph(rng.integers(0, 2 ** K, size=(n, n)), K)


def test_single_block_equals_complete_log_likelihood():
    g = _random_graph(6, 2, seed=1)
    theta = BlockParameters([1.0], [[[0.4, 0.3, 0.2, 0.1]]])
    assert exact_log_likelihood(g, theta) == pytest.approx(complete_log_likelihood(g, [0] * 6, theta), abs=1e-12)


def test_two_node_enumeration_by_hand():
    g = MultiplexGraph(np.array([[0, 1], [0, 0]]), 1)
    pi = np.array([[[0.6, 0.4], [0.3, 0.7]], [[0.8, 0.2], [0.5, 0.5]]])
    alpha = [0.35, 0.65]
    theta = BlockParameters(alpha, pi)
    total = 0.0
    for a in range(2):
        for b in range(2):
            total += alpha[a] * alpha[b] * pi[a, b, 1] * pi[b, a, 0]
    assert exact_log_likelihood(g, theta) == pytest.approx(math.log(total), abs=1e-12)


def test_elbo_never_exceeds_exact_log_likelihood():
    rng = np.random.default_rng(7)
    for trial in range(200):
        n, Q, K = int(rng.integers(2, 9)), int(rng.integers(1, 4)), int(rng.integers(1, 3))
        g = _random_graph(n, K, seed=trial)
        theta = random_parameters(Q, K, rng)
        tau = rng.dirichlet(np.ones(Q), size=n)
        assert elbo(g, tau, theta) <= exact_log_likelihood(g, theta) + 1e-10
        assert kl_decomposition_check(g, tau, theta).residual < 1e-8


@pytest.mark.parametrize("chunk_size", [1, 4, 27])
def test_chunked_scores_match_complete_log_likelihood(monkeypatch, chunk_size):
    rng = np.random.default_rng(17)
    g = _random_graph(6, 2, seed=17)
    theta = random_parameters(3, 2, rng)
    expected = exact_log_likelihood(g, theta)
    monkeypatch.setattr(oracle, "CHUNK_SIZE", chunk_size)
    post = exact_posterior(g, theta)
    digits = (np.arange(3 ** 6)[:, None] // 3 ** np.arange(6)[None, :]) % 3
    assert np.array_equal(post.assignments, digits)
    for z, p in zip(post.assignments[::37], post.probabilities[::37]):
        score = complete_log_likelihood(g, z, theta)
        assert math.log(p) + post.log_likelihood == pytest.approx(score, abs=1e-9)
    assert exact_log_likelihood(g, theta) == pytest.approx(expected, abs=1e-12)


def test_exact_log_likelihood_is_invariant_to_block_relabeling():
    rng = np.random.default_rng(9)
    g = _random_graph(6, 2, seed=9)
    theta = random_parameters(3, 2, rng)
    expected = exact_log_likelihood(g, theta)
    for sigma in ([1, 2, 0], [2, 1, 0], [0, 2, 1]):
        assert exact_log_likelihood(g, permute_blocks(theta, sigma)) == pytest.approx(expected, abs=1e-10)


def test_posterior_sums_to_one_and_marginals_are_rows():
    rng = np.random.default_rng(3)
    g = _random_graph(5, 1, seed=3)
    post = exact_posterior(g, random_parameters(3, 1, rng))
    assert post.probabilities.sum() == pytest.approx(1.0, abs=1e-12)
    assert post.assignments.shape == (3 ** 5, 5)
    assert np.allclose(post.marginals.sum(axis=1), 1.0)


def test_uninformative_graph_gives_prior_posterior():
    g = MultiplexGraph(np.zeros((4, 4), dtype=int), 1)
    pi = np.empty((2, 2, 2))
    pi[:] = [0.7, 0.3]
    alpha = np.array([0.2, 0.8])
    post = exact_posterior(g, BlockParameters(alpha, pi))
    prior = alpha[post.assignments].prod(axis=1)
    assert post.probabilities == pytest.approx(prior, abs=1e-12)


def test_posterior_mode_recovers_planted_labels():
    z = np.array([0, 0, 1, 1])
    words = (z[:, None] == z[None, :]).astype(int)
    g = MultiplexGraph(words, 1)
    pi = np.empty((2, 2, 2))
    pi[:] = [0.9, 0.1]
    pi[0, 0] = pi[1, 1] = [0.1, 0.9]
    post = exact_posterior(g, BlockParameters([0.5, 0.5], pi))
    mode = post.mode.tolist()
    assert mode in ([0, 0, 1, 1], [1, 1, 0, 0])


def test_kl_decomposition_single_block_is_exact():
    g = _random_graph(5, 2, seed=4)
    theta = BlockParameters([1.0], [[[0.1, 0.2, 0.3, 0.4]]])
    check = kl_decomposition_check(g, np.ones((5, 1)), theta)
    assert check.kl == pytest.approx(0.0, abs=1e-14)
    assert check.residual < 1e-10


def test_kl_decomposition_residual_on_random_instances():
    rng = np.random.default_rng(2024)
    for trial in range(100):
        g = _random_graph(5, 2, seed=1000 + trial)
        theta = random_parameters(2, 2, rng)
        tau = rng.dirichlet(np.ones(2), size=5)
        check = kl_decomposition_check(g, tau, theta)
        assert check.residual < 1e-8
        assert check.kl >= -1e-10


def test_kl_is_zero_when_posterior_is_the_prior():
    g = _random_graph(4, 2, seed=5)
    pi = np.empty((2, 2, 4))
    pi[:] = [0.4, 0.3, 0.2, 0.1]
    alpha = np.array([0.3, 0.7])
    tau = np.tile(alpha, (4, 1))
    check = kl_decomposition_check(g, tau, BlockParameters(alpha, pi))
    assert check.kl == pytest.approx(0.0, abs=1e-12)
    assert check.elbo == pytest.approx(check.log_likelihood, abs=1e-10)


def test_size_guard_raises():
    g = MultiplexGraph(np.zeros((25, 25), dtype=int), 1)
    theta = BlockParameters([0.5, 0.5], np.full((2, 2, 2), 0.5))
    with pytest.raises(OracleSizeError):
        exact_log_likelihood(g, theta)
    with pytest.raises(OracleSizeError):
        exact_posterior(g, theta)


def test_monte_carlo_estimate_agrees_with_enumeration():
    rng = np.random.default_rng(11)
    g = _random_graph(6, 1, seed=11)
    theta = random_parameters(2, 1, rng, concentration=5.0)
    estimate, stderr = monte_carlo_log_likelihood(g, theta, draws=200_000, seed=3)
    assert abs(estimate - exact_log_likelihood(g, theta)) < 4 * stderr


def test_monte_carlo_is_reproducible():
    rng = np.random.default_rng(12)
    g = _random_graph(5, 1, seed=12)
    theta = random_parameters(2, 1, rng)
    assert monte_carlo_log_likelihood(g, theta, 5000, seed=1) == monte_carlo_log_likelihood(g, theta, 5000, seed=1)
