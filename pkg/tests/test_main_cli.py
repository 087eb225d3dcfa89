import json

import pytest

from src import main as cli


def _simulate(out, n=30, seed=7):
    code = cli.main(["simulate", "--n", str(n), "--K", "2", "--Q", "2", "--seed", str(seed), "--out", str(out)])
    assert code == 0
    return [str(out / "layer1.tsv"), str(out / "layer2.tsv")]


def test_simulate_writes_layers_and_truth(tmp_path):
    _simulate(tmp_path / "sim")
    names = sorted(p.name for p in (tmp_path / "sim").iterdir())
    assert names == ["layer1.tsv", "layer2.tsv", "truth.json"]
    truth = json.loads((tmp_path / "sim" / "truth.json").read_text())
    assert truth["model"] == "sbm"
    assert len(truth["z"]) == 30


def test_simulate_is_byte_identical_for_same_seed(tmp_path):
    _simulate(tmp_path / "a")
    _simulate(tmp_path / "b")
    for name in ("layer1.tsv", "layer2.tsv", "truth.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_without_n_exits_with_usage(tmp_path, capsys):
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["simulate", "--out", str(tmp_path)])
    assert excinfo.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_settings_file_supplies_defaults_and_flags_win(tmp_path):
    settings = tmp_path / "settings.yaml"
    settings.write_text("n: 12\nseed: 3\nout: %s\n" % (tmp_path / "from_file"), encoding="utf-8")
    assert cli.main(["simulate", "--settings", str(settings)]) == 0
    truth = json.loads((tmp_path / "from_file" / "truth.json").read_text())
    assert truth["n"] == 12 and truth["seed"] == 3

    assert cli.main(["simulate", "--settings", str(settings), "--n", "14"]) == 0
    assert json.loads((tmp_path / "from_file" / "truth.json").read_text())["n"] == 14


def test_settings_file_with_unknown_key_exits_2(tmp_path):
    settings = tmp_path / "settings.yaml"
    settings.write_text("n: 12\nlayers_per_node: 3\n", encoding="utf-8")
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["simulate", "--settings", str(settings)])
    assert excinfo.value.code == 2


def test_fit_single_block_reports_unit_alpha(tmp_path):
    layers = _simulate(tmp_path / "sim")
    out = tmp_path / "fit.json"
    assert cli.main(["fit", "--layers", *layers, "--q", "1", "--fit-config", "fast", "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert payload["alpha"] == [1.0]
    assert payload["config"]["name"] == "fast"
    assert payload["icl"] is not None


def test_fit_is_deterministic_and_scores_against_truth(tmp_path):
    layers = _simulate(tmp_path / "sim", n=40)
    args = ["fit", "--layers", *layers, "--q", "2", "--restarts", "1", "--seed", "7", "--fit-config", "fast"]
    assert cli.main([*args, "--out", str(tmp_path / "a.json")]) == 0
    assert cli.main([*args, "--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    scored = tmp_path / "scored.json"
    code = cli.main([*args, "--score", str(tmp_path / "sim" / "truth.json"), "--out", str(scored)])
    assert code == 0
    assert 0.0 <= json.loads(scored.read_text())["ari"] <= 1.0


def test_fit_with_missing_layer_file_exits_2(tmp_path):
    code = cli.main(["fit", "--layers", str(tmp_path / "missing.tsv"), "--q", "2", "--out", str(tmp_path / "x.json")])
    assert code == 2


def test_fit_reports_non_convergence_with_exit_3(tmp_path):
    layers = _simulate(tmp_path / "sim")
    out = tmp_path / "fit.json"
    code = cli.main(["fit", "--layers", *layers, "--q", "3", "--max-iter", "1", "--fit-config", "fast", "--out", str(out)])
    assert code == 3
    assert json.loads(out.read_text())["converged"] is False


def test_select_single_candidate_prints_one(tmp_path, capsys):
    layers = _simulate(tmp_path / "sim")
    out = tmp_path / "select"
    code = cli.main(["select", "--layers", *layers, "--qmin", "1", "--qmax", "1", "--fit-config", "fast", "--out", str(out)])
    assert code == 0
    assert capsys.readouterr().out.strip().splitlines()[-1] == "1"
    assert (out / "icl_report.json").exists()
    assert (out / "icl.csv").read_text().splitlines()[0] == "Q,ICL"


def test_select_rejects_inverted_range(tmp_path):
    layers = _simulate(tmp_path / "sim")
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["select", "--layers", *layers, "--qmin", "3", "--qmax", "2"])
    assert excinfo.value.code == 2


def test_er_fit_writes_word_frequencies(tmp_path):
    layers = _simulate(tmp_path / "sim")
    out = tmp_path / "er.json"
    assert cli.main(["er-fit", "--layers", *layers, "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert len(payload["pi"]) == 4
    assert sum(payload["pi"]) == pytest.approx(1.0)


def test_oracle_on_small_instance(tmp_path):
    layers = _simulate(tmp_path / "sim", n=6)
    fit_json = tmp_path / "fit.json"
    cli.main(["fit", "--layers", *layers, "--q", "2", "--fit-config", "fast", "--out", str(fit_json)])
    out = tmp_path / "oracle.json"
    code = cli.main(
        ["oracle", "--layers", *layers, "--theta", str(tmp_path / "sim" / "truth.json"), "--tau", str(fit_json), "--out", str(out)]
    )
    assert code == 0
    payload = json.loads(out.read_text())
    assert len(payload["posterior_marginals"]) == 6
    assert payload["kl_decomposition"]["residual"] < 1e-8


def test_summarize_writes_block_tables(tmp_path):
    layers = _simulate(tmp_path / "sim", n=20)
    fit_json = tmp_path / "fit.json"
    cli.main(["fit", "--layers", *layers, "--q", "2", "--fit-config", "fast", "--out", str(fit_json)])
    attributes = tmp_path / "attributes.tsv"
    rows = ["node\tgroup"] + [f"{i}\t{'x' if i % 2 else 'y'}" for i in range(20)]
    attributes.write_text("\n".join(rows) + "\n", encoding="utf-8")
    out = tmp_path / "summary"
    code = cli.main(
        ["summarize", "--fit", str(fit_json), "--layers", *layers, "--attributes", str(attributes), "--out", str(out)]
    )
    assert code == 0
    names = {p.name for p in out.iterdir()}
    assert {"block_sizes.csv", "degrees.csv", "connection_profile.csv", "crosstab_group.csv"} <= names


def test_lab_command_delegates_to_pipeline(monkeypatch, tmp_path):
    calls = []

    def fake_run_lab(config_path, out_dir, force, jobs):
        calls.append((config_path, out_dir, force, jobs))
        return {"summary_csv": str(tmp_path / "summary.csv")}

    monkeypatch.setattr(cli, "run_lab", fake_run_lab)
    code = cli.main(["lab", "error-vs-n", "--config", "config/lab/smoke.yaml", "--out", str(tmp_path), "--jobs", "2"])
    assert code == 0
    assert calls == [("config/lab/smoke.yaml", str(tmp_path), False, 2)]
