import math

import numpy as np
import pytest
from scipy.special import softmax
from sklearn.metrics import adjusted_rand_score

from src.models.fit_config import FitConfig, Tolerances
from src.modules.consistency_lab import align_blocks
from src.modules.er import er_log_likelihood, fit_er, fit_er_covariates, intercept_start
from src.modules.graph import EdgeCovariates, MultiplexGraph, permute_nodes
from src.modules.model import BlockParameters, CovariateBlockParameters, permute_blocks, planted_parameters
from src.modules.simulate import sample_covariates, sample_sbm, sample_sbm_covariates
from src.modules.vem import (
    FitError,
    FitResult,
    e_step,
    elbo,
    elbo_covariates,
    fit,
    fit_covariates,
    initial_tau,
    m_step,
    m_step_covariates,
    map_tau,
)

FAST = FitConfig(restarts=3, max_outer_iterations=200, fixed_point_max_iterations=100)


def _random_graph(n, K, seed):
    rng = np.random.default_rng(seed)
    return MultiplexGraph(rng.integers(0, 2 ** K, size=(n, n)), K)


def _random_tau(n, Q, seed):
    return np.random.default_rng(seed).dirichlet(np.ones(Q), size=n)


def _separated_k1(n, seed):
    pi = np.empty((2, 2, 2))
    pi[:] = [0.9, 0.1]
    pi[0, 0] = pi[1, 1] = [0.2, 0.8]
    theta = BlockParameters([0.5, 0.5], pi)
    g, z = sample_sbm(theta, n, seed)
    return g, z, theta


def test_single_block_elbo_equals_er_log_likelihood():
    g = _random_graph(8, 2, seed=1)
    theta = m_step(g, np.ones((g.n, 1)))
    assert elbo(g, np.ones((g.n, 1)), theta) == pytest.approx(er_log_likelihood(g, fit_er(g)), abs=1e-10)


def test_elbo_two_node_hand_expansion():
    g = MultiplexGraph(np.array([[0, 1], [0, 0]]), 1)
    pi = np.array([[[0.6, 0.4], [0.3, 0.7]], [[0.8, 0.2], [0.5, 0.5]]])
    theta = BlockParameters([0.35, 0.65], pi)
    tau = np.array([[0.3, 0.7], [0.6, 0.4]])
    expected = 0.0
    for q in range(2):
        for l in range(2):
            expected += tau[0, q] * tau[1, l] * math.log(pi[q, l, 1])
            expected += tau[1, q] * tau[0, l] * math.log(pi[q, l, 0])
    for i in range(2):
        for q in range(2):
            expected += tau[i, q] * (math.log(theta.alpha[q]) - math.log(tau[i, q]))
    assert elbo(g, tau, theta) == pytest.approx(expected, abs=1e-12)


def test_elbo_is_invariant_to_block_relabeling():
    g = _random_graph(7, 2, seed=2)
    rng = np.random.default_rng(2)
    theta = BlockParameters(rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(4), size=(3, 3)))
    tau = _random_tau(7, 3, seed=3)
    sigma = [2, 0, 1]
    assert elbo(g, tau[:, sigma], permute_blocks(theta, sigma)) == pytest.approx(elbo(g, tau, theta), rel=1e-12)


def test_e_step_single_block_converges_immediately():
    g = _random_graph(6, 1, seed=4)
    theta = m_step(g, np.ones((6, 1)))
    post = e_step(g, theta, np.ones((6, 1)))
    assert post.converged and post.iterations == 1
    assert np.all(post.tau == 1.0)


def test_uniform_tau_is_fixed_point_for_symmetric_theta():
    g = _random_graph(9, 2, seed=5)
    pi = np.empty((3, 3, 4))
    pi[:] = [0.4, 0.3, 0.2, 0.1]
    theta = BlockParameters(np.full(3, 1 / 3), pi)
    post = e_step(g, theta, np.full((9, 3), 1 / 3))
    assert post.tau == pytest.approx(np.full((9, 3), 1 / 3), abs=1e-12)


def test_e_step_recovers_labels_from_true_start():
    g, z, theta = _separated_k1(60, seed=21)
    post = e_step(g, theta, map_tau(z, 2))
    assert np.mean(post.map_assignment == z) >= 0.95
    assert np.allclose(post.tau.sum(axis=1), 1.0, atol=1e-10)


def test_e_step_never_decreases_elbo():
    g = _random_graph(10, 2, seed=6)
    rng = np.random.default_rng(6)
    theta = BlockParameters(rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(4), size=(3, 3)))
    tau0 = _random_tau(10, 3, seed=7)
    post = e_step(g, theta, tau0, FitConfig(damping=0.3))
    assert elbo(g, post.tau, theta) >= elbo(g, tau0, theta) - 1e-12


def test_m_step_with_hard_tau_counts_block_pairs():
    words = np.array(
        [
            [0, 1, 1, 0],
            [1, 0, 0, 0],
            [0, 0, 0, 1],
            [1, 1, 1, 0],
        ]
    )
    g = MultiplexGraph(words, 1)
    z = np.array([0, 0, 1, 1])
    theta = m_step(g, map_tau(z, 2))
    assert theta.alpha.tolist() == [0.5, 0.5]
    # (0,1) covers 0->2, 0->3, 1->2, 1->3: one edge
    assert theta.pi[0, 0].tolist() == [0.0, 1.0]
    assert theta.pi[0, 1] == pytest.approx([0.75, 0.25])
    assert theta.pi[1, 0] == pytest.approx([0.5, 0.5])
    assert theta.pi[1, 1] == pytest.approx([0.0, 1.0])


def test_m_step_with_uniform_tau_gives_global_frequencies():
    g = _random_graph(9, 2, seed=8)
    theta = m_step(g, np.full((9, 3), 1 / 3))
    for q in range(3):
        for l in range(3):
            assert theta.pi[q, l] == pytest.approx(fit_er(g).pi, abs=1e-12)


def test_m_step_single_block_equals_fit_er():
    g = _random_graph(11, 3, seed=9)
    assert np.allclose(m_step(g, np.ones((11, 1))).pi[0, 0], fit_er(g).pi, atol=1e-12)


def test_m_step_flags_empty_block_pairs():
    g = _random_graph(5, 1, seed=10)
    tau = map_tau([0, 0, 0, 0, 0], 2)
    theta = m_step(g, tau)
    assert "empty_cell:1,1" in theta.flags
    assert "empty_cell:0,1" in theta.flags
    assert theta.pi[1, 1].tolist() == [0.5, 0.5]


def _simplex_directions(size):
    for a in range(size):
        for b in range(a + 1, size):
            d = np.zeros(size)
            d[a], d[b] = 1.0, -1.0
            yield d


def _elbo_gradients_at_m_step(g, tau):
    theta = m_step(g, tau)
    Q, W = theta.Q, g.n_words
    h = 1e-6
    grads = []
    for d in _simplex_directions(Q):
        plus = BlockParameters(theta.alpha + h * d, theta.pi)
        minus = BlockParameters(theta.alpha - h * d, theta.pi)
        grads.append((elbo(g, tau, plus) - elbo(g, tau, minus)) / (2 * h))
    for q in range(Q):
        for l in range(Q):
            for d in _simplex_directions(W):
                shift = np.zeros_like(theta.pi)
                shift[q, l] = d
                plus = BlockParameters(theta.alpha, theta.pi + h * shift)
                minus = BlockParameters(theta.alpha, theta.pi - h * shift)
                grads.append((elbo(g, tau, plus) - elbo(g, tau, minus)) / (2 * h))
    return np.asarray(grads)


def test_m_step_is_stationary_for_the_elbo():
    rng = np.random.default_rng(12)
    for instance in range(50):
        n, Q, K = int(rng.integers(8, 13)), int(rng.integers(1, 4)), int(rng.integers(1, 3))
        g = _random_graph(n, K, seed=100 + instance)
        tau = _random_tau(n, Q, seed=200 + instance)
        grads = _elbo_gradients_at_m_step(g, tau)
        if grads.size:
            assert np.max(np.abs(grads)) < 1e-4, instance


def _mean_field_update(g, theta, tau):
    log_pi = np.log(theta.pi)
    scores = np.tile(np.log(theta.alpha), (g.n, 1))
    for i in range(g.n):
        for j in range(g.n):
            if i != j:
                scores[i] += log_pi[:, :, g.words[i, j]] @ tau[j] + log_pi[:, :, g.words[j, i]].T @ tau[j]
    return softmax(scores, axis=1)


def test_converged_e_step_is_a_mean_field_fixed_point():
    rng = np.random.default_rng(40)
    config = FitConfig(fixed_point_tolerance=1e-10, fixed_point_max_iterations=2000)
    for instance in range(10):
        g = _random_graph(8, 2, seed=300 + instance)
        theta = BlockParameters(rng.dirichlet(np.full(2, 5.0)), rng.dirichlet(np.full(4, 5.0), size=(2, 2)))
        post = e_step(g, theta, _random_tau(8, 2, seed=400 + instance), config)
        assert post.converged
        assert np.abs(_mean_field_update(g, theta, post.tau) - post.tau).max() < 1e-6


def test_initial_tau_rows_on_simplex_and_reproducible():
    g, _, _ = _separated_k1(30, seed=3)
    for strategy in ("spectral", "random"):
        for restart in (0, 1):
            tau = initial_tau(g, 2, strategy, seed=5, restart=restart)
            assert np.allclose(tau.sum(axis=1), 1.0)
            assert np.array_equal(tau, initial_tau(g, 2, strategy, seed=5, restart=restart))


def test_initial_tau_on_edgeless_graph_falls_back_to_random():
    g = MultiplexGraph(np.zeros((6, 6), dtype=int), 1)
    tau = initial_tau(g, 2, "spectral", seed=0, restart=0)
    assert np.allclose(tau.sum(axis=1), 1.0)


def test_fit_single_block_is_er_mle_after_one_iteration():
    g = _random_graph(12, 2, seed=14)
    result = fit(g, 1, FAST)
    assert result.converged
    assert len(result.elbo_trace) == 1
    assert result.theta.alpha.tolist() == [1.0]
    assert result.theta.pi[0, 0] == pytest.approx(fit_er(g).pi, abs=1e-12)
    assert result.n_restarts == 1


def test_fit_elbo_trace_is_monotone():
    g, _, _ = _separated_k1(40, seed=15)
    result = fit(g, 3, FAST)
    trace = np.asarray(result.elbo_trace)
    assert np.all(np.diff(trace) >= -1e-9 * np.abs(trace[:-1]))
    assert np.allclose(result.tau.sum(axis=1), 1.0, atol=1e-10)


def test_fit_recovers_planted_partition():
    g, z, _ = _separated_k1(80, seed=16)
    result = fit(g, 2, FAST)
    assert result.converged
    assert adjusted_rand_score(z, result.map_assignment) >= 0.95


def test_fit_is_deterministic_for_fixed_seed():
    g, _, _ = _separated_k1(30, seed=17)
    config = FAST.with_overrides(seed=7)
    assert fit(g, 2, config).to_dict() == fit(g, 2, config).to_dict()


def test_fit_parallel_restarts_match_sequential():
    g, _, _ = _separated_k1(30, seed=18)
    sequential = fit(g, 2, FAST)
    parallel = fit(g, 2, FAST.with_overrides(jobs=3))
    assert parallel.restart == sequential.restart
    assert parallel.elbo == pytest.approx(sequential.elbo, rel=1e-12)
    assert np.array_equal(parallel.map_assignment, sequential.map_assignment)


def test_permuting_nodes_permutes_tau_and_keeps_elbo():
    g, _, _ = _separated_k1(40, seed=19)
    config = FAST.with_overrides(elbo_relative_tolerance=1e-12, fixed_point_tolerance=1e-9)
    perm = np.random.default_rng(19).permutation(g.n)
    base = fit(g, 2, config)
    moved = fit(permute_nodes(g, perm), 2, config)
    assert moved.elbo == pytest.approx(base.elbo, abs=1e-6)
    assert adjusted_rand_score(base.map_assignment[perm], moved.map_assignment) == pytest.approx(1.0)


def test_fit_rejects_q_outside_range():
    g = _random_graph(4, 1, seed=20)
    with pytest.raises(FitError):
        fit(g, 5, FAST)
    with pytest.raises(FitError):
        fit(g, 0, FAST)


def test_fit_flags_parameters_that_fail_identifiability():
    pi = [[[0.2, 0.8], [0.9, 0.1]], [[0.9, 0.1], [0.3, 0.7]]]
    g, _ = sample_sbm(BlockParameters([0.4, 0.6], pi), 60, seed=30)
    assert "not_identifiable" not in fit(g, 2, FAST).flags
    strict = FAST.with_overrides(tolerances=Tolerances(identifiability=0.9))
    assert "not_identifiable" in fit(g, 2, strict).flags


def test_fit_result_dict_roundtrip():
    g, _, _ = _separated_k1(20, seed=22)
    result = fit(g, 2, FAST)
    payload = result.to_dict()
    assert "wall_time" not in payload
    again = FitResult.from_dict(payload)
    assert again.to_dict() == payload


def test_covariate_elbo_matches_plain_elbo_when_beta_is_zero():
    g = _random_graph(7, 2, seed=23)
    rng = np.random.default_rng(23)
    theta = BlockParameters(rng.dirichlet(np.ones(2)), rng.dirichlet(np.ones(4), size=(2, 2)))
    mu = np.array([[intercept_start(theta.pi[q, l]) for l in range(2)] for q in range(2)])
    cov_theta = CovariateBlockParameters(theta.alpha, mu, np.zeros(mu.shape + (1,)))
    cov = sample_covariates(7, 1, seed=23)
    tau = _random_tau(7, 2, seed=24)
    assert elbo_covariates(g, cov, tau, cov_theta) == pytest.approx(elbo(g, tau, theta), abs=1e-9)


def test_intercept_only_m_step_reproduces_closed_form_pi():
    g = _random_graph(10, 2, seed=25)
    tau = _random_tau(10, 2, seed=26)
    closed = m_step(g, tau)
    cov = sample_covariates(10, 1, seed=25)
    theta = m_step_covariates(g, cov, tau, intercept_only=True)
    assert np.all(theta.beta == 0.0)
    for q in range(2):
        for l in range(2):
            logits = np.concatenate([[0.0], theta.mu[q, l]])
            probs = np.exp(logits - logits.max())
            assert probs / probs.sum() == pytest.approx(closed.pi[q, l], abs=1e-10)


def test_covariate_m_step_without_covariates_matches_closed_form():
    g = _random_graph(10, 1, seed=27)
    tau = _random_tau(10, 2, seed=28)
    closed = m_step(g, tau)
    theta = m_step_covariates(g, EdgeCovariates.empty(10), tau)
    for q in range(2):
        for l in range(2):
            p1 = 1.0 / (1.0 + math.exp(-theta.mu[q, l, 0]))
            assert p1 == pytest.approx(closed.pi[q, l, 1], abs=1e-7)


def test_covariate_m_step_reports_standard_errors():
    g = _random_graph(20, 2, seed=31)
    cov = sample_covariates(20, 1, seed=31)
    tau = _random_tau(20, 2, seed=32)
    theta = m_step_covariates(g, cov, tau)
    assert theta.mu_stderr.shape == theta.mu.shape
    assert theta.beta_stderr.shape == theta.beta.shape
    assert np.all(theta.beta_stderr > 0)
    assert m_step_covariates(g, cov, tau, intercept_only=True).mu_stderr is None
    again = CovariateBlockParameters.from_dict(theta.to_dict())
    assert again.beta_stderr == pytest.approx(theta.beta_stderr)


def test_fit_covariates_single_block_matches_er_covariate_fit():
    cov = sample_covariates(25, 1, seed=29)
    g = _random_graph(25, 1, seed=29)
    result = fit_covariates(g, cov, 1, FAST)
    er = fit_er_covariates(g, cov)
    assert result.theta.mu[0, 0] == pytest.approx(er.mu, abs=1e-6)
    assert result.theta.beta[0, 0] == pytest.approx(er.beta, abs=1e-6)


@pytest.mark.slow
def test_fit_planted_two_layer_instance_reaches_high_ari():
    theta = planted_parameters(2, 2, within=[0.1, 0.1, 0.1, 0.7], between=[0.85, 0.05, 0.05, 0.05])
    good = 0
    for seed in range(20):
        g, z = sample_sbm(theta, 200, seed)
        result = fit(g, 2, FAST.with_overrides(seed=seed))
        aligned = permute_blocks(result.theta, align_blocks(result.theta, theta))
        err_pi = float(np.abs(aligned.pi - theta.pi).max())
        good += int(adjusted_rand_score(z, result.map_assignment) >= 0.95 and err_pi < 0.05)
    assert good >= 18


@pytest.mark.slow
def test_covariate_fit_standard_errors_cover_the_planted_slopes():
    mu = np.array([[[1.5], [-1.5]], [[-1.5], [1.0]]])
    beta = np.array([[[[1.0]], [[-0.5]]], [[[0.5]], [[1.0]]]])
    theta = CovariateBlockParameters([0.5, 0.5], mu, beta)
    covered = 0
    runs = 20
    for seed in range(runs):
        cov = sample_covariates(150, 1, seed=seed)
        g, z = sample_sbm_covariates(theta, cov, seed)
        result = fit_covariates(g, cov, 2, FAST.with_overrides(restarts=2, seed=seed))
        perm = [0, 1] if np.mean(result.map_assignment == z) >= 0.5 else [1, 0]
        cells = np.ix_(perm, perm)
        z_scores = (result.theta.beta[cells] - beta) / result.theta.beta_stderr[cells]
        covered += int(np.all(np.abs(z_scores) < 4))
    assert covered >= 18
