import pytest

from beliefkit.config import ConfigError, RunConfig, load_config


def test_load_and_override(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[run]\nenv = tiger\nseed = 3\n[bounds]\nhorizon = 4\n[agent]\nlr_Policy = 0.1\n")
    cfg = load_config(path)
    assert (cfg.env, cfg.seed) == ("tiger", 3)
    assert cfg.section("bounds") == {"horizon": "4"}
    assert "lr_Policy" in cfg.section("agent")
    cfg.override("seed=9")
    cfg.override("bounds.horizon = 6")
    assert cfg.seed == 9 and cfg.section("bounds")["horizon"] == "6"


def test_errors(tmp_path):
    cfg = RunConfig()
    for bad in ("seed", "run.nope=1", "weird.key=1", "seed=x"):
        with pytest.raises(ConfigError):
            cfg.override(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_as_dict_is_sorted():
    cfg = RunConfig()
    cfg.override("belief.steps=5")
    cfg.override("belief.lr=0.1")
    assert list(cfg.as_dict()["belief"]) == ["lr", "steps"]
