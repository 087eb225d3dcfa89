import pytest
import yaml

from src.models import fit_config
from src.models.fit_config import FitConfig, FitConfigError, get_fit_config, load_fit_config


def test_load_default_fit_config_has_meta_and_sections():
    cfg = load_fit_config("default")
    assert cfg["name"] == "default"
    assert len(cfg["meta"]["hash"]) == 12
    assert cfg["restarts"]["count"] == 10


def test_default_yaml_matches_dataclass_defaults():
    loaded = get_fit_config("default")
    assert loaded.with_overrides(hash="") == FitConfig()


def test_fast_profile_is_lighter():
    fast = get_fit_config("fast")
    assert fast.restarts < get_fit_config("default").restarts
    assert fast.name == "fast"


def test_load_unknown_config_raises():
    with pytest.raises(FitConfigError):
        load_fit_config("does_not_exist")


def test_unknown_keys_are_rejected(tmp_path, monkeypatch):
    cfg = load_fit_config("default")
    broken = {k: v for k, v in cfg.items() if k != "meta"}
    broken["variational"] = dict(broken["variational"], momentum=0.9)
    (tmp_path / "broken.yaml").write_text(yaml.safe_dump(broken), encoding="utf-8")
    monkeypatch.setenv("MPSBM_CONFIG_DIR", str(tmp_path))
    with pytest.raises(FitConfigError, match="unknown keys"):
        load_fit_config("broken")


def test_config_dir_follows_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MPSBM_CONFIG_DIR", str(tmp_path))
    assert fit_config.config_dir() == tmp_path
    monkeypatch.delenv("MPSBM_CONFIG_DIR")
    assert fit_config.config_dir() == fit_config.DEFAULT_CONFIG_DIR


@pytest.mark.parametrize(
    "overrides",
    [{"damping": 1.0}, {"restarts": 0}, {"init_strategy": "kmeans++"}, {"fixed_point_tolerance": 0.0}],
)
def test_invalid_values_are_rejected(overrides):
    with pytest.raises(FitConfigError):
        FitConfig().with_overrides(**overrides)


def test_with_overrides_skips_none():
    base = FitConfig()
    assert base.with_overrides(seed=None, jobs=None) is base
    assert base.with_overrides(seed=3).seed == 3
