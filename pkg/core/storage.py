"""
Artifact Storage

Binary + JSON sidecar persistence for parameter maps, acquisitions,
dictionaries, traces and metric reports, plus the SHA-256 manifest that
ties a run directory together. Every file is written atomically.

Formats (all binaries little-endian, row-major):
    maps:        <name>.f64  float64 (4, n, m)     + <name>.json
    k-space:     kspace.c128 complex128 (L, n, m)  + acquisition.json
    masks:       masks.bits  np.packbits of (L, n, m)
    dictionary:  dictionary.c128 complex128 (A, L) + dictionary.json
    states:      <name>.f64  float64 (any shape)   + <name>.json
"""

import json
import logging
import os
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from .blip_init import Dictionary
from .bloch_model import FlipSchedule
from .errors import DataIntegrityError
from .experiment import MetricsReport
from .mri_operator import CHANNEL_NAMES, CHANNEL_UNITS, AcquisitionData, ParameterMaps
from .optimizer import IterationTrace
from .utils import sha256_file, write_atomic, write_text_atomic

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
ACQUISITION_HEADER = "acquisition.json"
KSPACE_FILE = "kspace.c128"
MASKS_FILE = "masks.bits"
SCHEDULE_FILE = "schedule.csv"
DICTIONARY_FILE = "dictionary.c128"
DICTIONARY_HEADER = "dictionary.json"
FORMAT_VERSION = 1

FLOAT_LE = np.dtype("<f8")
COMPLEX_LE = np.dtype("<c16")


def dump_json(payload: Dict) -> str:
    """Canonical JSON text (sorted keys, trailing newline)."""
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def read_json(path: str) -> Dict:
    if not os.path.exists(path):
        raise DataIntegrityError(f"missing artifact: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataIntegrityError(f"malformed JSON in {path}: {e}") from e


def _read_binary(path: str, dtype: np.dtype, shape: Tuple[int, ...]) -> np.ndarray:
    if not os.path.exists(path):
        raise DataIntegrityError(f"missing artifact: {path}")
    values = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape))
    if values.size != expected:
        raise DataIntegrityError(f"{path}: expected {expected} values, found {values.size}")
    return values.reshape(shape).astype(dtype.newbyteorder("="))


def write_pgm(channel: np.ndarray, path: str) -> str:
    """16-bit binary PGM preview, linearly scaled from min..max to 0..65535."""
    channel = np.asarray(channel, dtype=np.float64)
    finite = np.where(np.isfinite(channel), channel, 0.0)
    low, high = float(finite.min()), float(finite.max())
    span = high - low
    scaled = np.zeros_like(finite) if span == 0 else (finite - low) / span
    pixels = np.round(scaled * 65535.0).astype(">u2")
    n, m = channel.shape
    header = f"P5\n{m} {n}\n65535\n".encode("ascii")
    return write_atomic(path, header + pixels.tobytes())


def save_maps(maps: ParameterMaps, directory: str, name: str = "maps", previews: bool = True) -> Dict[str, str]:
    """
    Write parameter maps as flat float64 plus sidecar and optional PGM previews.

    Returns:
        {file name: path} of everything written.
    """
    n, m = maps.shape
    written = {}
    binary = os.path.join(directory, f"{name}.f64")
    written[f"{name}.f64"] = write_atomic(binary, maps.values.astype(FLOAT_LE).tobytes())
    sidecar = {
        "format_version": FORMAT_VERSION,
        "dtype": "float64",
        "byte_order": "little",
        "layout": "channel, row, column",
        "n": n,
        "m": m,
        "channels": list(CHANNEL_NAMES),
        "units": list(CHANNEL_UNITS),
    }
    written[f"{name}.json"] = write_text_atomic(os.path.join(directory, f"{name}.json"), dump_json(sidecar))
    if previews:
        for i, channel in enumerate(CHANNEL_NAMES):
            file_name = f"{name}_{channel}.pgm"
            written[file_name] = write_pgm(maps.channel(i), os.path.join(directory, file_name))
    return written


def load_maps(directory: str, name: str = "maps") -> ParameterMaps:
    sidecar = read_json(os.path.join(directory, f"{name}.json"))
    shape = (4, int(sidecar["n"]), int(sidecar["m"]))
    return ParameterMaps(_read_binary(os.path.join(directory, f"{name}.f64"), FLOAT_LE, shape))


def save_acquisition(data: AcquisitionData, directory: str, extra: Optional[Dict] = None) -> Dict[str, str]:
    """Write k-space, packed masks, the flip schedule and the JSON header."""
    n, m = data.shape
    written = {
        KSPACE_FILE: write_atomic(os.path.join(directory, KSPACE_FILE),
                                  data.frames.astype(COMPLEX_LE).tobytes()),
        MASKS_FILE: write_atomic(os.path.join(directory, MASKS_FILE),
                                 np.packbits(data.masks.reshape(-1)).tobytes()),
    }
    schedule_path = os.path.join(directory, SCHEDULE_FILE)
    data.schedule.save(schedule_path)
    written[SCHEDULE_FILE] = schedule_path
    written["schedule.json"] = os.path.splitext(schedule_path)[0] + ".json"
    header = {
        "format_version": FORMAT_VERSION,
        "n": n,
        "m": m,
        "L": data.length,
        "rate": data.rate,
        "seed": data.seed,
        "tr_ms": data.schedule.tr,
        "schedule": SCHEDULE_FILE,
        "kspace": KSPACE_FILE,
        "kspace_dtype": "complex128",
        "masks": MASKS_FILE,
        "byte_order": "little",
        **(extra or {}),
    }
    written[ACQUISITION_HEADER] = write_text_atomic(
        os.path.join(directory, ACQUISITION_HEADER), dump_json(header))
    return written


def load_acquisition(directory: str) -> AcquisitionData:
    header = read_json(os.path.join(directory, ACQUISITION_HEADER))
    L, n, m = int(header["L"]), int(header["n"]), int(header["m"])
    frames = _read_binary(os.path.join(directory, header["kspace"]), COMPLEX_LE, (L, n, m))
    packed_path = os.path.join(directory, header["masks"])
    if not os.path.exists(packed_path):
        raise DataIntegrityError(f"missing artifact: {packed_path}")
    packed = np.fromfile(packed_path, dtype=np.uint8)
    masks = np.unpackbits(packed, count=L * n * m).astype(bool).reshape(L, n, m)
    sched = FlipSchedule.load(os.path.join(directory, header["schedule"]), tr=float(header["tr_ms"]))
    return AcquisitionData(frames=frames, masks=masks, schedule=sched,
                           rate=float(header["rate"]), seed=header.get("seed"))


def save_dictionary(dictionary: Dictionary, directory: str) -> Dict[str, str]:
    header = {
        "format_version": FORMAT_VERSION,
        "atoms": dictionary.size,
        "L": dictionary.length,
        "tr_ms": dictionary.tr,
        "t1_grid_ms": dictionary.t1_grid.tolist(),
        "t2_grid_ms": dictionary.t2_grid.tolist(),
        "omega_grid_hz": dictionary.omega_grid.tolist(),
        "order": "t1 slowest, omega fastest",
        "dtype": "complex128",
        "byte_order": "little",
    }
    return {
        DICTIONARY_FILE: write_atomic(os.path.join(directory, DICTIONARY_FILE),
                                      dictionary.atoms.astype(COMPLEX_LE).tobytes()),
        DICTIONARY_HEADER: write_text_atomic(os.path.join(directory, DICTIONARY_HEADER), dump_json(header)),
    }


def load_dictionary(directory: str) -> Dictionary:
    header = read_json(os.path.join(directory, DICTIONARY_HEADER))
    atoms = _read_binary(os.path.join(directory, DICTIONARY_FILE), COMPLEX_LE,
                         (int(header["atoms"]), int(header["L"])))
    grids = [np.asarray(header[k], dtype=np.float64) for k in ("t1_grid_ms", "t2_grid_ms", "omega_grid_hz")]
    mesh = np.meshgrid(*grids, indexing="ij")
    params = np.stack([g.reshape(-1) for g in mesh], axis=-1)
    if params.shape[0] != atoms.shape[0]:
        raise DataIntegrityError("dictionary grids do not match the stored atom count")
    return Dictionary(atoms=atoms, params=params, norms=np.linalg.norm(atoms, axis=1),
                      t1_grid=grids[0], t2_grid=grids[1], omega_grid=grids[2],
                      tr=float(header["tr_ms"]))


def save_states(states: np.ndarray, directory: str, name: str, meta: Optional[Dict] = None) -> Dict[str, str]:
    """Persist a reference state array (e.g. a golden Bloch trace)."""
    states = np.asarray(states, dtype=np.float64)
    sidecar = {"shape": list(states.shape), "dtype": "float64", "byte_order": "little", **(meta or {})}
    return {
        f"{name}.f64": write_atomic(os.path.join(directory, f"{name}.f64"), states.astype(FLOAT_LE).tobytes()),
        f"{name}.json": write_text_atomic(os.path.join(directory, f"{name}.json"), dump_json(sidecar)),
    }


def load_states(directory: str, name: str) -> np.ndarray:
    sidecar = read_json(os.path.join(directory, f"{name}.json"))
    return _read_binary(os.path.join(directory, f"{name}.f64"), FLOAT_LE, tuple(sidecar["shape"]))


def save_trace(trace: IterationTrace, directory: str, name: str = "trace") -> Dict[str, str]:
    return {
        f"{name}.csv": write_text_atomic(os.path.join(directory, f"{name}.csv"), trace.to_csv()),
        f"{name}.json": write_text_atomic(os.path.join(directory, f"{name}.json"),
                                          dump_json(trace.header_dict())),
    }


def save_report(report: MetricsReport, directory: str, name: str = "metrics") -> Dict[str, str]:
    return {
        f"{name}.json": write_text_atomic(os.path.join(directory, f"{name}.json"), report.to_json() + "\n"),
        f"{name}.txt": write_text_atomic(os.path.join(directory, f"{name}.txt"), report.to_table() + "\n"),
    }


def write_manifest(directory: str, files: Iterable[str], extra: Optional[Dict] = None) -> str:
    """Hash the named files (relative to directory) into manifest.json."""
    hashes = {name: sha256_file(os.path.join(directory, name)) for name in sorted(set(files))}
    payload = {"format_version": FORMAT_VERSION, "files": hashes, **(extra or {})}
    path = write_text_atomic(os.path.join(directory, MANIFEST_NAME), dump_json(payload))
    logger.info("Wrote manifest with %d entries to %s", len(hashes), path)
    return path


def verify_manifest(directory: str) -> Dict:
    """
    Check every file listed in manifest.json against its SHA-256.

    Returns:
        The manifest payload.

    Raises:
        DataIntegrityError: If the manifest or a listed file is missing, or a hash differs.
    """
    manifest = read_json(os.path.join(directory, MANIFEST_NAME))
    for name, expected in manifest.get("files", {}).items():
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise DataIntegrityError(f"{name} listed in the manifest is missing from {directory}")
        actual = sha256_file(path)
        if actual != expected:
            raise DataIntegrityError(f"{name}: hash {actual[:12]} does not match manifest {expected[:12]}")
    return manifest
