import json

import pytest

from lidar_mos.context import CONFIG_ENV, CONFIG_KEYS, ConfigKey, keys_for, load_config, parse_override
from lidar_mos.errors import ConfigError


def load(**kwargs):
    kwargs.setdefault("project_config", None)
    return load_config(**kwargs)


@pytest.fixture(autouse=True)
def no_env_config(monkeypatch):
    monkeypatch.delenv(CONFIG_ENV, raising=False)


class TestKeys:
    def test_defaults_validate(self):
        cfg = load()
        assert cfg["grid.h"] == 24
        assert cfg.grid_spec().bins == (24, 32, 8)
        assert cfg.model_config().refine_hidden == 16
        assert cfg.out_dir.name == "out"

    def test_int_rejects_bool_and_float(self):
        key = CONFIG_KEYS["train.epochs"]
        with pytest.raises(ConfigError):
            key.check(True)
        with pytest.raises(ConfigError):
            key.check(2.5)

    def test_float_accepts_int(self):
        assert CONFIG_KEYS["loss.alpha"].check(2) == 2.0

    def test_list_items_checked(self):
        key = ConfigKey("x", [], "int_list", "")
        assert key.check((1, 2)) == [1, 2]
        with pytest.raises(ConfigError):
            key.check([1, "2"])

    def test_null_only_where_allowed(self):
        assert CONFIG_KEYS["loss.class_weights"].check(None) is None
        with pytest.raises(ConfigError):
            CONFIG_KEYS["seed"].check(None)

    def test_keys_for_command(self):
        names = {k.name for k in keys_for("loopclose")}
        assert "loop.sectors" in names and "synth.frame_rate" in names
        assert "train.epochs" not in names
        assert keys_for("no-such-command") == []


class TestOverrides:
    @pytest.mark.parametrize("text,expected", [
        ("seed=3", ("seed", 3)),
        ("model.dtype=float64", ("model.dtype", "float64")),
        ("loss.class_weights=[1, 4]", ("loss.class_weights", [1, 4])),
        (" train.shuffle =false", ("train.shuffle", False)),
    ])
    def test_parse(self, text, expected):
        assert parse_override(text) == expected

    @pytest.mark.parametrize("text", ["seed", "=3"])
    def test_malformed(self, text):
        with pytest.raises(ConfigError):
            parse_override(text)

    def test_precedence(self, tmp_path):
        project = tmp_path / "mos_config.json"
        project.write_text(json.dumps({"seed": 1, "train.epochs": 4, "threads": 2}))
        run_file = tmp_path / "run.json"
        run_file.write_text(json.dumps({"seed": 2, "train.epochs": 5}))
        cfg = load_config(run_file, ["seed=3"], threads=6, project_config=project)
        assert (cfg["seed"], cfg["train.epochs"], cfg.threads) == (3, 5, 6)
        assert cfg.sources == ["defaults", str(project), str(run_file), "--set", "flags"]

    def test_flag_beats_override(self):
        assert load(overrides=["seed=3"], seed=9).seed == 9

    def test_env_names_config_file(self, tmp_path, monkeypatch):
        path = tmp_path / "env.json"
        path.write_text(json.dumps({"loop.sectors": 12}))
        monkeypatch.setenv(CONFIG_ENV, str(path))
        assert load()["loop.sectors"] == 12


class TestErrors:
    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            load(overrides=["grid.depth=8"])

    def test_wrong_type(self):
        with pytest.raises(ConfigError):
            load(overrides=["train.shuffle=1"])

    def test_bad_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{seed: 1")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load(config_path=path)

    def test_top_level_must_be_object(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            load(config_path=path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load(config_path=tmp_path / "absent.json")

    @pytest.mark.parametrize("override", [
        "grid.w=12",
        "grid.rho_min=50.0",
        "model.stage_channels=[4, 8]",
        "model.dtype=float16",
        "loss.class_weights=[1.0]",
        "loss.weight_clamp=[2.0, 1.0]",
        "paths.ignore_class_ids=[0, 252]",
        "loop.sectors=0",
        "synth.scenario=\"motorway\"",
        "baseline.distance_threshold=0",
    ])
    def test_cross_field_rules(self, override):
        with pytest.raises(ConfigError):
            load(overrides=[override])


def test_builders_follow_values():
    cfg = load(overrides=["loss.class_weights=[1, 3]", "loop.sectors=24", "synth.rings=4"], seed=5)
    assert cfg.loss_config().class_weights == (1.0, 3.0)
    assert cfg.loop_config().sectors == 24
    assert cfg.sensor_model().rings == 4
    assert cfg.train_config().seed == 5
    assert cfg.weight_clamp() == (0.1, 10.0)


def test_fallback_weights_when_unset():
    cfg = load()
    assert cfg.loss_config([0.5, 5.0]).class_weights == (0.5, 5.0)
    assert cfg.loss_config().class_weights == (1.0, 1.0)
