import json

import pytest

from mmdpose.config import DEFAULTS, ConfigError, default_config, from_dict, load


def _write(tmp_path, obj, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj, indent=2))
    return p


def test_seed_is_mandatory(tmp_path):
    with pytest.raises(ConfigError, match="seed"):
        load(_write(tmp_path, {"out_dir": "x"}))


def test_defaults_and_overrides(tmp_path):
    run = load(_write(tmp_path, {"seed": 4, "refiner": {"epochs": 3}}))
    assert run.seed == 4 and run["refiner"]["epochs"] == 3
    assert run["refiner"]["hidden_dim"] == DEFAULTS["refiner"]["hidden_dim"]
    assert run.out_dir == tmp_path / DEFAULTS["out_dir"]
    again = run.override(**{"refiner.epochs": 5})
    assert again["refiner"]["epochs"] == 5 and run["refiner"]["epochs"] == 3


def test_hash_ignores_out_dir_only():
    a = default_config(1)
    assert a.hash == a.override(out_dir="elsewhere").hash
    assert a.hash != a.override(seed=2).hash


def test_unknown_field_reports_line(tmp_path):
    p = _write(tmp_path, {"seed": 1, "refiner": {"epochs": 2, "epohcs": 3}})
    with pytest.raises(ConfigError) as exc:
        load(p)
    msg = str(exc.value)
    assert "refiner.epohcs" in msg and f"{p}:5" in msg


def test_bad_value_reports_field_and_line(tmp_path):
    p = _write(tmp_path, {"seed": 1, "loss": {"epsilon": -1}})
    with pytest.raises(ConfigError) as exc:
        load(p)
    assert "loss.epsilon" in str(exc.value) and f"{p}:4" in str(exc.value)


def test_malformed_json_reports_position(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text('{"seed": 1,\n "synth": {"count": }\n}')
    with pytest.raises(ConfigError, match=r"broken.json:2:"):
        load(p)


def test_missing_topology_file(tmp_path):
    run = load(_write(tmp_path, {"seed": 1, "topology": "nope.json"}))
    with pytest.raises(ConfigError, match="topology"):
        run.topology()


def test_not_an_object():
    with pytest.raises(ConfigError):
        from_dict([1, 2])
