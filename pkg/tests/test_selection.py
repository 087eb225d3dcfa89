import math

import numpy as np
import pytest

from src.models.fit_config import FitConfig
from src.modules import selection
from src.modules.er import ErParameters
from src.modules.graph import EdgeCovariates, MultiplexGraph
from src.modules.model import complete_log_likelihood, planted_parameters
from src.modules.selection import (
    IclRecord,
    SelectionError,
    SmallGraphWarning,
    _select,
    icl,
    icl_covariates,
    icl_penalty,
    select_q,
)
from src.modules.simulate import sample_er, sample_sbm
from src.modules.vem import fit

FAST = FitConfig(restarts=3, max_outer_iterations=200, fixed_point_max_iterations=100)
PLANTED = planted_parameters(2, 2, within=[0.1, 0.1, 0.1, 0.7], between=[0.85, 0.05, 0.05, 0.05])


def test_penalty_single_block_two_layers():
    assert icl_penalty(1, 2, 10) == pytest.approx(1.5 * math.log(180))
    assert icl_penalty(1, 2, 10) == pytest.approx(7.7876, abs=1e-4)


def test_penalty_single_block_one_layer_has_no_alpha_term():
    assert icl_penalty(1, 1, 12) == pytest.approx(0.5 * math.log(12 * 11))


def test_penalty_counts_covariate_parameters():
    n = 30
    assert icl_penalty(2, 1, n, d=1) == pytest.approx(0.5 * (8 * math.log(n * (n - 1)) + math.log(n)))
    assert icl_penalty(2, 2, n, d=0) < icl_penalty(2, 2, n, d=1) < icl_penalty(2, 2, n, d=2)


def test_icl_is_completed_loglik_minus_penalty():
    g, _ = sample_sbm(PLANTED, 30, seed=1)
    result = fit(g, 2, FAST)
    completed = complete_log_likelihood(g, result.map_assignment, result.theta)
    assert icl(g, result) == pytest.approx(completed - icl_penalty(2, 2, 30))


def test_icl_covariates_without_covariate_model_falls_back_to_icl():
    g, _ = sample_sbm(PLANTED, 20, seed=2)
    result = fit(g, 2, FAST)
    assert icl_covariates(g, EdgeCovariates.empty(20), result) == pytest.approx(icl(g, result))


def test_select_prefers_smaller_q_on_ties():
    records = [
        IclRecord(Q=3, elbo=None, completed_log_likelihood=None, penalty=0.0, icl=-10.0),
        IclRecord(Q=2, elbo=None, completed_log_likelihood=None, penalty=0.0, icl=-10.0 + 1e-12),
        IclRecord(Q=1, elbo=None, completed_log_likelihood=None, penalty=0.0, icl=-50.0),
        IclRecord(Q=4, elbo=None, completed_log_likelihood=None, penalty=0.0, icl=None, error="boom"),
    ]
    assert _select(records) == 2
    assert _select(records[3:]) is None


def test_select_q_single_candidate():
    g, _ = sample_sbm(PLANTED, 20, seed=3)
    report = select_q(g, [1], FAST)
    assert report.selected_q == 1
    assert report.to_frame().columns.tolist() == ["Q", "ICL"]


def test_select_q_report_is_recomputable():
    g, _ = sample_sbm(PLANTED, 40, seed=4)
    report = select_q(g, [1, 2, 3], FAST)
    for record in report.to_dict()["records"]:
        assert record["icl"] == pytest.approx(record["completed_log_likelihood"] - record["penalty"], abs=1e-12)
        assert record["penalty"] == pytest.approx(icl_penalty(record["Q"], 2, 40))


def test_select_q_ignores_candidate_order():
    g, _ = sample_sbm(PLANTED, 40, seed=5)
    forward = select_q(g, [1, 2, 3], FAST)
    backward = select_q(g, [3, 1, 2], FAST)
    assert forward.to_dict() == backward.to_dict()


def test_select_q_finds_planted_blocks():
    g, _ = sample_sbm(PLANTED, 80, seed=6)
    assert select_q(g, range(1, 4), FAST).selected_q == 2


def test_select_q_warns_when_n_below_twice_q():
    g, _ = sample_sbm(PLANTED, 5, seed=7)
    with pytest.warns(SmallGraphWarning):
        report = select_q(g, [1, 3], FAST)
    assert "n_below_2q" in report.flags


def test_select_q_rejects_bad_ranges():
    g = MultiplexGraph(np.zeros((4, 4), dtype=int), 1)
    with pytest.raises(SelectionError):
        select_q(g, [], FAST)
    with pytest.raises(SelectionError):
        select_q(g, [1, 5], FAST)


def test_select_q_records_failed_candidates(monkeypatch):
    real_fit = selection.fit

    def flaky_fit(g, Q, config):
        if Q == 2:
            raise RuntimeError("diverged")
        return real_fit(g, Q, config)

    monkeypatch.setattr(selection, "fit", flaky_fit)
    g, _ = sample_sbm(PLANTED, 30, seed=8)
    report = select_q(g, [1, 2], FAST)
    failed = [r for r in report.records if r.Q == 2][0]
    assert failed.error == "diverged"
    assert failed.icl is None
    assert report.selected_q == 1


def test_select_q_parallel_matches_sequential():
    g, _ = sample_sbm(PLANTED, 30, seed=9)
    sequential = select_q(g, [1, 2], FAST)
    parallel = select_q(g, [1, 2], FAST.with_overrides(jobs=2))
    assert parallel.selected_q == sequential.selected_q
    for a, b in zip(parallel.records, sequential.records):
        assert a.icl == pytest.approx(b.icl, rel=1e-12)


@pytest.mark.slow
def test_select_q_on_er_data_picks_one_block():
    hits = 0
    for seed in range(20):
        g = sample_er(ErParameters([0.7, 0.1, 0.1, 0.1]), 150, 2, seed=seed)
        hits += int(select_q(g, range(1, 4), FAST.with_overrides(seed=seed)).selected_q == 1)
    assert hits >= 16


@pytest.mark.slow
def test_select_q_on_planted_data_picks_two_blocks():
    hits = 0
    for seed in range(20):
        g, _ = sample_sbm(PLANTED, 200, seed=seed)
        report = select_q(g, range(1, 4), FAST.with_overrides(seed=seed))
        scores = {r.Q: r.icl for r in report.records}
        hits += int(scores[2] > scores[1] and scores[2] > scores[3])
    assert hits >= 16
