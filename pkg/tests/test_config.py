import json

import numpy as np
import pytest

from rbmpc.config import (ConfigError, expand_axis, expand_grid, load_config, parse_config,
                          preset_config, scale_mesh, scaled_count)


@pytest.mark.parametrize("name", ["reaction-diffusion-1d", "welding-2d"])
def test_presets_parse_and_round_trip(tmp_path, name):
    cfg = preset_config(name)
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    again = load_config(path)
    assert again.to_json() == cfg.to_json()
    assert again.definition == cfg.definition
    for (a, pa), (b, pb) in zip(cfg.training_sets(), again.training_sets()):
        assert a == b and np.array_equal(pa, pb)


def test_shipped_training_sets():
    one = preset_config("reaction-diffusion-1d")
    sets = dict(one.training_sets())
    assert len(sets) == 4 and all(len(v) == 20 for v in sets.values())
    assert sorted({v[0, 1] for v in sets.values()}) == [1e-4, 1e-3, 1e-2, 1e-1]
    (name, pts), = preset_config("welding-2d").training_sets()
    assert len(pts) == 200
    assert np.allclose(pts.min(axis=0), [0.5, 1e-6]) and np.allclose(pts.max(axis=0), [2.0, 1e-4])


def test_unknown_key_reports_line(tmp_path):
    text = '{\n  "preset": "reaction-diffusion-1d",\n  "mpc": {\n    "horizon": 3\n  }\n}\n'
    path = tmp_path / "c.json"
    path.write_text(text)
    with pytest.raises(ConfigError, match=r"'horizon' \(line 4\)"):
        load_config(path)


def test_json_syntax_error_reports_position(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{\n  "preset": "welding-2d",\n  "scale": ,\n}')
    with pytest.raises(ConfigError, match="line 3"):
        load_config(path)


def test_empty_training_set_rejected():
    bases = [{"name": "b", "training": {"mu1": [], "lambda": [0.01]}}]
    with pytest.raises(ConfigError, match="empty"):
        parse_config({"preset": "reaction-diffusion-1d", "greedy": {"bases": bases}})


def test_training_outside_domain_rejected():
    bases = [{"name": "b", "training": {"mu1": [1.0, 30.0], "lambda": [0.01]}}]
    with pytest.raises(ConfigError, match="outside"):
        parse_config({"preset": "reaction-diffusion-1d", "greedy": {"bases": bases}})


def test_unknown_parameter_rejected():
    with pytest.raises(ConfigError, match="unknown parameter"):
        expand_grid({"mu1": [1.0], "lambda": [1.0], "nu": [2.0]}, ("mu1", "lambda"))
    with pytest.raises(ConfigError, match="no axis"):
        expand_grid({"mu1": [1.0]}, ("mu1", "lambda"))


def test_bad_problem_reported():
    with pytest.raises(ConfigError, match="problem"):
        parse_config({"preset": "reaction-diffusion-1d", "problem": {"ocp": {"tau": -1.0}}})
    with pytest.raises(ConfigError, match="custom"):
        parse_config({"greedy": {}})
    with pytest.raises(ConfigError, match="unknown preset"):
        parse_config({"preset": "heat"})


@pytest.mark.parametrize("scale", [0.0, -0.5, 1.5])
def test_scale_outside_unit_interval_rejected(scale):
    with pytest.raises(ConfigError, match="scale"):
        preset_config("welding-2d", scale)


def test_scale_rules():
    assert scaled_count(20, 0.5) == 10 and scaled_count(3, 0.1) == 2 and scaled_count(1, 0.1) == 1
    assert scale_mesh({"dim": 1, "n_elems": 200}, 0.5)["n_elems"] == 100
    m = scale_mesh({"dim": 2, "nx": 135, "ny": 26}, 0.5)
    assert (m["nx"], m["ny"]) == (95, 18)
    cfg = preset_config("reaction-diffusion-1d", 0.5)
    assert cfg.loops() == 50 and cfg.N_max() == 9
    assert preset_config("reaction-diffusion-1d", 0.001).loops() == 1


def test_axis_forms():
    assert np.array_equal(expand_axis(3.0), [3.0])
    assert np.allclose(expand_axis({"linspace": [0, 1, 5]}), [0, 0.25, 0.5, 0.75, 1])
    assert np.allclose(expand_axis({"geomspace": [1, 100, 3]}), [1, 10, 100])
    assert len(expand_axis({"linspace": [0, 1, 30]}, 0.5)) == 15
    with pytest.raises(ConfigError):
        expand_axis({"arange": [0, 1, 0.1]})


def test_grid_is_cartesian_in_parameter_order():
    pts = expand_grid({"lambda": [1.0, 2.0], "mu1": [5.0, 6.0, 7.0]}, ("mu1", "lambda"))
    assert pts.shape == (6, 2)
    assert {tuple(p) for p in pts} == {(a, b) for a in (5.0, 6.0, 7.0) for b in (1.0, 2.0)}


def test_N_values_capped_at_basis_size():
    cfg = parse_config({"preset": "reaction-diffusion-1d", "test": {"N_values": [1, 5, 40]}})
    assert cfg.N_values("test") == [1, 5, 9]


def test_overrides_merge_with_preset_defaults():
    cfg = parse_config(json.loads('{"preset": "welding-2d", "mpc": {"loops": 4}}'))
    assert cfg.mpc["loops"] == 4 and cfg.mpc["n"] == 5 and len(cfg.mpc["cases"]) == 8
