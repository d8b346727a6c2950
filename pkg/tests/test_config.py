import pytest
import yaml

from cobo.config import ConfigError, apply_overrides, config_from_dict, config_to_dict, load_config


def test_defaults():
    cfg = config_from_dict({})
    assert cfg.task == "bitstring" and cfg.budget == 500 and cfg.n_fail == 10
    assert cfg.loss.c_lip == 10 and cfg.weighting.quantile == 0.95


def test_nested_and_overrides():
    cfg = config_from_dict({"loss": {"c_z": 1.0}}, ["gp.sparse=true", "budget=200", "weighting.sigma=0.2"])
    assert cfg.loss.c_z == 1.0 and cfg.gp.sparse is True
    assert cfg.budget == 200 and cfg.weighting.sigma == 0.2


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="gp.bogus"):
        config_from_dict({"gp": {"bogus": 1}})
    with pytest.raises(ConfigError, match="nonsense"):
        config_from_dict({}, ["nonsense=3"])


def test_invariants():
    with pytest.raises(ConfigError):
        config_from_dict({"budget": 10, "n_init": 20})
    with pytest.raises(ConfigError):
        config_from_dict({"top_k": 1})
    with pytest.raises(ConfigError):
        config_from_dict({"method": "random"})


def test_bad_override_syntax():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["budget"])


def test_missing_file_message(tmp_path):
    path = tmp_path / "nope.yaml"
    with pytest.raises(ConfigError, match="nope.yaml"):
        load_config(path)


def test_round_trip(tmp_path):
    cfg = config_from_dict({"seed": 4, "tr": {"length_init": 0.4}})
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(config_to_dict(cfg)))
    assert load_config(p) == cfg


def test_shipped_configs_load():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    files = sorted(root.glob("*.yaml"))
    assert {f.name for f in files} >= {"bitstring.yaml", "arith.yaml"}
    for f in files:
        data = yaml.safe_load(f.read_text())
        if "families" in data:
            continue
        load_config(f)
