"""Tests for experiment files, overrides, hashing and sweep specs."""

import pathlib

import pytest

from harness.experiment import (
    KNOBS,
    SweepSpec,
    config_from_mapping,
    load_config,
    parse_overrides,
    parse_sweep_values,
    write_config,
)
from spankey.errors import ConfigError

CONFIG_DIR = pathlib.Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def experiment_file(tmp_path):
    path = tmp_path / "exp.env"
    path.write_text("# example\nINJECT_GAMMA=0.25\nRUN_SEED=1\nINJECT_SITES=0+1\n", encoding="utf-8")
    return path


def test_defaults_with_seed():
    cfg = load_config(None, ["RUN_SEED=0"], use_env=False)
    assert cfg["NET_HIDDEN"] == (64, 64)
    assert cfg.plan.sites == (0,)
    assert cfg.deny.mode == "none"
    assert cfg.data_seed == 0


def test_precedence_file_env_override(experiment_file, monkeypatch):
    monkeypatch.setenv("SPANKEY_INJECT_GAMMA", "0.5")
    monkeypatch.setenv("SPANKEY_KEY_M", "4")
    monkeypatch.setenv("SPANKEY_OUTPUT_ROOT", "elsewhere")
    cfg = load_config(experiment_file, ["INJECT_GAMMA=2.0"])
    assert cfg["INJECT_GAMMA"] == 2.0
    assert cfg["KEY_M"] == 4
    assert cfg["RUN_SEED"] == 1
    assert cfg.plan.sites == (0, 1)


def test_env_is_ignored_when_disabled(experiment_file, monkeypatch):
    monkeypatch.setenv("SPANKEY_INJECT_GAMMA", "0.5")
    assert load_config(experiment_file, use_env=False)["INJECT_GAMMA"] == 0.25


@pytest.mark.parametrize(
    "overrides",
    [
        ["RUN_SEED=1", "NOT_A_KEY=3"],
        ["RUN_SEED=1", "KEY_M=eight"],
        ["KEY_M=4"],
        ["RUN_SEED=1", "KEY_M=64"],
        ["RUN_SEED=1", "INJECT_SITES=2"],
        ["RUN_SEED=1", "DENY_MODE=B"],
        ["RUN_SEED=1", "DENY_MODE=A", "DENY_LAMBDA=0"],
        ["RUN_SEED=1", "INJECT_SITES=1+0"],
        ["RUN_SEED=1", "DATA_KIND=cifar"],
    ],
)
def test_invalid_configs(overrides):
    with pytest.raises(ConfigError):
        load_config(None, overrides, use_env=False)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config(pathlib.Path("no/such/file.env"), use_env=False)


def test_override_syntax():
    assert parse_overrides(["A=1", " B = x=y "]) == {"A": "1", "B": "x=y"}
    with pytest.raises(ConfigError):
        parse_overrides(["A"])


def test_hash_is_stable_and_ignores_run_id():
    a = load_config(None, ["RUN_SEED=1", "RUN_ID=first"], use_env=False)
    b = load_config(None, ["RUN_SEED=1", "RUN_ID=second", "RUN_OUTPUT_DIR=/tmp/x"], use_env=False)
    c = load_config(None, ["RUN_SEED=1", "INJECT_GAMMA=1.01"], use_env=False)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
    assert len(a.config_hash()) == 64


def test_default_run_id_uses_hash():
    cfg = load_config(None, ["RUN_SEED=1"], use_env=False)
    assert cfg.run_id == f"run-{cfg.config_hash()[:10]}"


def test_written_config_reloads(tmp_path, tiny_config):
    cfg = tiny_config("DENY_ON=wrong_key,no_key", "KEY_PER_LAYER_BASIS=true")
    path = write_config(cfg, tmp_path / "config.env")
    again = load_config(path, use_env=False)
    assert again.values == cfg.values
    assert path.read_text().startswith(f"# config_hash={cfg.config_hash()}")


def test_record_mapping_round_trip(tiny_config):
    cfg = tiny_config()
    assert config_from_mapping(cfg.to_text()).config_hash() == cfg.config_hash()


def test_every_knob_formats_and_parses_back():
    cfg = load_config(None, ["RUN_SEED=5"], use_env=False)
    text = cfg.to_text()
    assert set(text) == set(KNOBS)
    for key, knob in KNOBS.items():
        assert knob.parse(text[key]) == cfg[key]


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.env")), ids=lambda p: p.stem)
def test_bundled_experiments_validate(path):
    cfg = load_config(path, use_env=False)
    assert cfg.run_id == path.stem.replace("_", "-")


def test_sweep_values():
    assert parse_sweep_values("layers", "0;2;0+2") == ((0,), (2,), (0, 2))
    assert parse_sweep_values("gamma", "0.5; 1") == (0.5, 1.0)
    assert parse_sweep_values("m", "4;8") == (4, 8)
    with pytest.raises(ConfigError):
        parse_sweep_values("depth", "1")
    with pytest.raises(ConfigError):
        parse_sweep_values("m", "four")


def test_sweep_spec_names_runs(tiny_config):
    spec = SweepSpec("layers", ((0,), (0, 1)), tiny_config())
    configs = spec.configs()
    assert [cfg.run_id for _, cfg in configs] == ["tiny-layers-0", "tiny-layers-0+1"]
    assert [cfg.plan.sites for _, cfg in configs] == [(0,), (0, 1)]


def test_sweep_spec_validates_each_value(tiny_config):
    with pytest.raises(ConfigError):
        SweepSpec("m", (64,), tiny_config()).configs()
    with pytest.raises(ConfigError):
        SweepSpec("m", (), tiny_config())
