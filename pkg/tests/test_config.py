from pathlib import Path

import pytest

from eadro.config import ConfigError, RunConfig, load_config, parse_override

ROOT = Path(__file__).resolve().parents[1]


def test_parse_override():
    assert parse_override("train.epochs=5") == (["train", "epochs"], 5)
    assert parse_override("model.localizer=pooled") == (["model", "localizer"], "pooled")
    assert parse_override("train.lr=1e-3") == (["train", "lr"], 1e-3)
    assert parse_override("model.use_graph=false") == (["model", "use_graph"], False)
    with pytest.raises(ConfigError):
        parse_override("train.epochs")


def test_shipped_configs_load():
    for name in ("default.toml", "smoke.toml"):
        cfg = load_config(ROOT / "configs" / name)
        assert isinstance(cfg, RunConfig)
    assert load_config(ROOT / "configs" / "default.toml").train.epochs == 50


def test_overrides_apply_and_change_digest():
    base = load_config(None)
    cfg = load_config(None, ["train.epochs=7", "simulate.noise.cpu_noise=2"])
    assert cfg.train.epochs == 7 and cfg.simulate.noise.cpu_noise == 2.0
    assert cfg.digest() != base.digest() and base.digest() == load_config(None).digest()


@pytest.mark.parametrize("override", ["train.epochz=3", "train.epochs=1.5", "train.epochs=true",
                                      "model.use_graph=3", "train.lr=-1", "seed.x=1"])
def test_bad_values_rejected(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_unreadable_or_malformed_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[train\n")
    with pytest.raises(ConfigError):
        load_config(bad)
