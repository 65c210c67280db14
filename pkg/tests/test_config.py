import pytest

from udc.config import (PRESETS, RunConfig, config_from_dict, dump_config, load_config, parse_override,
                        preset_dict)
from udc.errors import ConfigError


@pytest.mark.parametrize("name", PRESETS)
def test_presets_load_and_validate(name):
    cfg = load_config(preset=name)
    assert cfg.eta == 0.2 and cfg.drl.levels == 4 and cfg.drl.codes_per_level == 64
    assert cfg.drl.alpha == 0.25


def test_desk_preset_scale():
    cfg = load_config(preset="desk")
    assert cfg.data.synthetic.n_patients == 2000 and cfg.data.synthetic.n_diseases == 200
    assert cfg.pcm.dim == 32 and cfg.drl.dim == 32


def test_precedence_file_then_overrides_then_seed(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("task: med\npcm:\n  dim: 16\n")
    cfg = load_config(path, preset="desk", overrides=["pcm.dim=8", "drl.alpha=0.5"], seed=7)
    assert (cfg.task, cfg.pcm.dim, cfg.drl.alpha, cfg.seed) == ("med", 8, 0.5, 7)
    assert cfg.pcm.n_layers == 2  # untouched keys keep the preset value


def test_parse_override_nesting_and_yaml_values():
    assert parse_override("a.b=3") == {"a": {"b": 3}}
    assert parse_override("ks=[1, 2]") == {"ks": [1, 2]}
    with pytest.raises(ConfigError):
        parse_override("novalue")


@pytest.mark.parametrize("override", ["pcm.dimm=3", "pcm.dim=abc", "eta=1.5", "task=labs",
                                      "drl.kappa=2", "data.split=[0.5, 0.5]", "no_finetune=1"])
def test_bad_values_rejected(override):
    with pytest.raises(ConfigError):
        load_config(preset="desk", overrides=[override])


def test_unknown_preset_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        preset_dict("huge")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")
    (tmp_path / "bad.yaml").write_text("a: [1,\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


def test_dump_round_trip_and_section_hash(tmp_path):
    cfg = load_config(preset="desk", seed=3)
    dump_config(cfg, tmp_path / "c.yaml")
    again = load_config(tmp_path / "c.yaml", preset="default")
    assert again == cfg
    other = config_from_dict({**cfg.to_dict(), "finetune": {**cfg.to_dict()["finetune"], "epochs": 1}})
    assert other.section_hash("pcm", "drl") == cfg.section_hash("pcm", "drl")
    assert other.section_hash("finetune") != cfg.section_hash("finetune")


def test_files_source_needs_paths():
    cfg = RunConfig()
    cfg.data.source = "files"
    with pytest.raises(ConfigError):
        cfg.validate()
