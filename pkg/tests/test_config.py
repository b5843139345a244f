import json

import pytest

from vsnerf import config as cfgmod
from vsnerf.config import ConfigError, parse_override, resolve, set_key


def test_defaults_are_complete():
    tree = cfgmod.default_config()
    assert tree["train"]["sampler"] == "vs"
    assert tree["train"]["lambda_depu"] == pytest.approx(1e-4)
    assert tree["distill"]["c_in"] == 384 and tree["distill"]["c_out"] == 32
    tc = cfgmod.train_config(tree)
    tc.validate()
    assert tc.iterations == 3000 and tc.vs_active_iterations == 500


def test_precedence_env_file_set_flags(tmp_path, monkeypatch):
    monkeypatch.setenv(cfgmod.SEED_ENV, "5")
    assert resolve()["seed"] == 5
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seed": 6, "train": {"iterations": 10, "field": {"width": 8}}}))
    tree = resolve(str(f))
    assert tree["seed"] == 6 and tree["train"]["iterations"] == 10
    assert tree["train"]["field"]["width"] == 8 and tree["train"]["field"]["depth"] == 4
    tree = resolve(str(f), ["train.iterations=20", "seed=7"])
    assert tree["train"]["iterations"] == 20 and tree["seed"] == 7
    tree = resolve(str(f), ["train.iterations=20"], {"train.iterations": 30, "seed": None})
    assert tree["train"]["iterations"] == 30 and tree["seed"] == 6


def test_override_parsing():
    assert parse_override("a.b=3") == ("a.b", 3)
    assert parse_override("a=uniform") == ("a", "uniform")
    assert parse_override("a=[1, 2]") == ("a", [1, 2])
    with pytest.raises(ConfigError):
        parse_override("novalue")


@pytest.mark.parametrize("key,value,fragment", [
    ("train.bogus", 1, "train.bogus"),
    ("bogus.x", 1, "bogus.x"),
    ("train.iterations", "many", "train.iterations"),
    ("train.iterations", 2.5, "train.iterations"),
    ("train.center_measures", 1, "train.center_measures"),
    ("train.field", 3, "train.field"),
])
def test_bad_keys_name_the_key(key, value, fragment):
    tree = cfgmod.default_config()
    with pytest.raises(ConfigError, match=fragment.replace(".", r"\.")):
        set_key(tree, key, value)


def test_int_accepted_for_float_key():
    tree = cfgmod.default_config()
    set_key(tree, "train.lr", 1)
    assert isinstance(tree["train"]["lr"], float)


def test_optional_key_accepts_value():
    tree = cfgmod.default_config()
    set_key(tree, "train.t_far", 4.0)
    assert cfgmod.train_config(tree).t_far == 4.0


def test_bad_env_seed(monkeypatch):
    monkeypatch.setenv(cfgmod.SEED_ENV, "x")
    with pytest.raises(ConfigError, match=cfgmod.SEED_ENV):
        resolve()


def test_bad_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        resolve(str(tmp_path / "missing.json"))
    f = tmp_path / "bad.json"
    f.write_text("{")
    with pytest.raises(ConfigError, match="valid JSON"):
        resolve(str(f))


def test_scene_spec_random_and_explicit():
    tree = cfgmod.default_config()
    spec = cfgmod.scene_spec(tree)
    assert len(spec.spheres) == 3 and len(spec.boxes) == 2
    tree["scene"]["random"] = False
    tree["scene"]["spheres"] = [{"center": [0, 0, 0], "radius": 0.5, "color": [1, 0, 0]}]
    spec = cfgmod.scene_spec(tree)
    assert len(spec.spheres) == 1 and not spec.boxes
