"""Tests for artifact persistence and the run manifest."""

import json
import os

import numpy as np
import pytest

from core.blip_init import build_dictionary
from core.bloch_model import synth_flip_schedule
from core.errors import DataIntegrityError
from core.experiment import evaluate_maps, make_phantom
from core.storage import (
    load_acquisition,
    load_dictionary,
    load_maps,
    load_states,
    save_acquisition,
    save_dictionary,
    save_maps,
    save_report,
    save_states,
    verify_manifest,
    write_manifest,
    write_pgm,
)

from conftest import make_tiny_data, random_maps, random_masks


def test_maps_round_trip(tmp_path):
    maps = random_maps(3, 5, seed=1)
    written = save_maps(maps, str(tmp_path))
    assert set(written) == {"maps.f64", "maps.json", "maps_rho.pgm", "maps_t1.pgm", "maps_t2.pgm", "maps_omega.pgm"}
    assert load_maps(str(tmp_path)) == maps
    assert os.path.getsize(tmp_path / "maps.f64") == 4 * 3 * 5 * 8
    sidecar = json.loads((tmp_path / "maps.json").read_text(encoding="utf-8"))
    assert sidecar["channels"] == ["rho", "t1", "t2", "omega"]
    assert sidecar["units"] == ["a.u.", "ms", "ms", "Hz"]


def test_pgm_preview_header(tmp_path):
    channel = np.arange(6, dtype=float).reshape(2, 3)
    path = write_pgm(channel, str(tmp_path / "preview.pgm"))
    raw = open(path, "rb").read()
    header = b"P5\n3 2\n65535\n"
    assert raw.startswith(header)
    pixels = np.frombuffer(raw[len(header):], dtype=">u2")
    assert pixels[0] == 0 and pixels[-1] == 65535
    assert pixels.size == 6


def test_constant_pgm_is_black(tmp_path):
    path = write_pgm(np.full((2, 2), 7.0), str(tmp_path / "flat.pgm"))
    pixels = np.frombuffer(open(path, "rb").read()[len(b"P5\n2 2\n65535\n"):], dtype=">u2")
    np.testing.assert_array_equal(pixels, 0)


def test_acquisition_round_trip(tmp_path):
    sched = synth_flip_schedule(8, seed=1)
    data = make_tiny_data(random_maps(4, 4, seed=2), sched, random_masks(8, 4, 4, seed=3))
    save_acquisition(data, str(tmp_path), extra={"phantom_seed": 2})
    loaded = load_acquisition(str(tmp_path))
    np.testing.assert_array_equal(loaded.frames, data.frames)
    np.testing.assert_array_equal(loaded.masks, data.masks)
    np.testing.assert_allclose(loaded.schedule.angles, sched.angles, rtol=1e-14)
    assert loaded.schedule.tr == sched.tr
    header = json.loads((tmp_path / "acquisition.json").read_text(encoding="utf-8"))
    assert header["phantom_seed"] == 2
    assert header["L"] == 8


def test_dictionary_round_trip(tmp_path):
    sched = synth_flip_schedule(8, seed=1)
    dictionary = build_dictionary([600.0, 1200.0], [60.0, 120.0], [-10.0, 0.0, 10.0], sched)
    save_dictionary(dictionary, str(tmp_path))
    loaded = load_dictionary(str(tmp_path))
    np.testing.assert_array_equal(loaded.atoms, dictionary.atoms)
    np.testing.assert_array_equal(loaded.params, dictionary.params)
    np.testing.assert_allclose(loaded.norms, dictionary.norms)
    assert loaded.tr == dictionary.tr


def test_states_round_trip(tmp_path):
    states = np.random.default_rng(0).standard_normal((2, 5, 3))
    save_states(states, str(tmp_path), "golden", meta={"tr_ms": 10.0})
    np.testing.assert_array_equal(load_states(str(tmp_path), "golden"), states)


def test_truncated_binary_is_rejected(tmp_path):
    save_maps(random_maps(2, 2, seed=0), str(tmp_path), previews=False)
    with open(tmp_path / "maps.f64", "r+b") as f:
        f.truncate(8)
    with pytest.raises(DataIntegrityError):
        load_maps(str(tmp_path))


def test_missing_artifacts_are_integrity_errors(tmp_path):
    with pytest.raises(DataIntegrityError):
        load_maps(str(tmp_path))
    with pytest.raises(DataIntegrityError):
        load_acquisition(str(tmp_path))
    (tmp_path / "maps.json").write_text("{broken", encoding="utf-8")
    with pytest.raises(DataIntegrityError):
        load_maps(str(tmp_path))


def test_manifest_detects_tampering(tmp_path):
    phantom = make_phantom(16, seed=0)
    written = save_maps(phantom.maps, str(tmp_path), previews=False)
    written.update(save_report(evaluate_maps(phantom.maps, phantom.maps), str(tmp_path)))
    write_manifest(str(tmp_path), written, extra={"stage": "test"})
    manifest = verify_manifest(str(tmp_path))
    assert manifest["stage"] == "test"
    assert set(manifest["files"]) == set(written)

    raw = bytearray((tmp_path / "maps.f64").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "maps.f64").write_bytes(bytes(raw))
    with pytest.raises(DataIntegrityError):
        verify_manifest(str(tmp_path))


def test_manifest_detects_missing_file(tmp_path):
    written = save_maps(random_maps(2, 2, seed=0), str(tmp_path), previews=False)
    write_manifest(str(tmp_path), written)
    os.remove(tmp_path / "maps.json")
    with pytest.raises(DataIntegrityError):
        verify_manifest(str(tmp_path))


def test_atomic_writes_leave_no_temporaries(tmp_path):
    save_maps(random_maps(2, 2, seed=0), str(tmp_path))
    save_maps(random_maps(2, 2, seed=1), str(tmp_path))
    assert sorted(os.listdir(tmp_path)) == sorted(
        ["maps.f64", "maps.json", "maps_rho.pgm", "maps_t1.pgm", "maps_t2.pgm", "maps_omega.pgm"])
    assert load_maps(str(tmp_path)) == random_maps(2, 2, seed=1)
