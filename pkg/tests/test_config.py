"""Tests for RunConfig loading, unit conversion and validation."""

import json

import numpy as np
import pytest

from core.config import RunConfig, list_presets, load_preset, resolve_config
from core.errors import ConfigError


def test_defaults_round_trip_through_json():
    config = RunConfig()
    assert RunConfig.from_dict(json.loads(config.to_json())) == config


def test_presets_load():
    names = list_presets()
    assert {"desk", "c2f_blip", "c2f_constant", "full_scale"} <= set(names)
    for name in names:
        assert load_preset(name).name == name


def test_comparison_presets_spend_the_same_budget():
    assert load_preset("c2f_constant").optimizer.c2f_schedule().nominal_budget() == 1000
    assert load_preset("c2f_blip").optimizer.c2f_schedule().nominal_budget() == 1000


def test_unit_conversion():
    config = RunConfig()
    np.testing.assert_allclose(config.optimizer.tau0.step_sizes().tau, [0.1, 1e6, 1e5, 1e-8])
    tissue = config.init.tissue()
    assert (tissue.rho, tissue.t1, tissue.t2, tissue.omega) == (0.42, 2000.0, 200.0, 0.0)
    t1, t2, omega = config.blip.grids_ms()
    assert t1[0] == 500.0 and t1[-1] == 6000.0
    assert t2[0] == 50.0 and t2[-1] == pytest.approx(600.0)
    assert len(omega) == 11


def test_floors_null_disables_projection():
    floors = RunConfig().optimizer.backtrack().floors
    assert floors[:3] == (0.0, 1.0, 1.0)
    assert floors[3] == float("-inf")


def test_integers_are_accepted_for_floats():
    config = RunConfig.from_dict({"schedule": {"tr_ms": 10}})
    assert isinstance(config.schedule.tr_ms, float)


@pytest.mark.parametrize("payload, field", [
    ({"optimizer": {"tua0": {}}}, "optimizer.tua0"),
    ({"colour": "red"}, "colour"),
    ({"phantom": {"size": "big"}}, "phantom.size"),
    ({"chunk_size": True}, "chunk_size"),
    ({"method": "NEWTON"}, "method"),
    ({"phantom": {"size": 8}}, "phantom.size"),
    ({"acquisition": {"rate": 0.3}}, "acquisition.rate"),
    ({"acquisition": {"rate": 1 / 3}}, "acquisition.rate"),
    ({"optimizer": {"c2f_increments": [4, 4, 1], "c2f_iterations": [1, 1, 1]}}, "optimizer.c2f_increments"),
    ({"optimizer": {"c2f_increments": [4, 1], "c2f_iterations": [1]}}, "optimizer.c2f_iterations"),
    ({"optimizer": {"tau0": {"rho": -0.1}}}, "optimizer.tau0.rho"),
    ({"optimizer": {"true_objective_every": -1}}, "optimizer.true_objective_every"),
    ({"blip": {"mu": 0.0}}, "blip.mu"),
    ({"blip": {"rho_mode": "phase"}}, "blip.rho_mode"),
    ({"init": {"t1_s": 0.0}}, "init"),
])
def test_invalid_configs_name_the_field(payload, field):
    with pytest.raises(ConfigError) as excinfo:
        RunConfig.from_dict(payload)
    assert excinfo.value.field == field
    assert str(excinfo.value).startswith(field)


def test_c2f_checks_are_skipped_for_fine():
    config = RunConfig.from_dict({"method": "FINE", "optimizer": {"c2f_increments": [1, 2]}})
    assert config.method == "FINE"


def test_resolve_config_from_path(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"name": "custom", "phantom": {"size": 32}}), encoding="utf-8")
    config = resolve_config(str(path))
    assert config.name == "custom"
    assert config.phantom.size == 32
    assert config.method == "BLIP+C2F"


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        RunConfig.load(str(broken))
    with pytest.raises(ConfigError) as excinfo:
        resolve_config(preset="no_such_preset")
    assert excinfo.value.field == "preset"


def test_relative_output_dir_resolves_against_project_root(tmp_path):
    config = RunConfig()
    assert config.resolved_output_dir().endswith("runs/desk") or config.resolved_output_dir().endswith("runs\\desk")
    config.output_dir = str(tmp_path)
    assert config.resolved_output_dir() == str(tmp_path)
