"""
Utility functions for the qMRI toolkit.

Shared helpers for console encoding, seeded random streams, voxel-chunked
parallel maps, hashing and atomic file writes.
"""

import hashlib
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, TypeVar

import numpy as np

T = TypeVar("T")

# Independent generator streams. Changing one seed never perturbs the others.
STREAM_PHANTOM = 0
STREAM_MASKS = 1
STREAM_GRID_OFFSETS = 2
STREAM_NOISE = 3

STREAM_NAMES: Dict[int, str] = {
    STREAM_PHANTOM: "phantom/schedule perturbations",
    STREAM_MASKS: "EPI mask offsets",
    STREAM_GRID_OFFSETS: "temporal grid offsets",
    STREAM_NOISE: "acquisition noise",
}

DEFAULT_CHUNK_SIZE = 2048


def configure_encoding() -> None:
    """
    Configure console encoding for Windows compatibility.

    Ensures UTF-8 output even on older Windows terminals.
    """
    if sys.stdout.encoding != 'utf-8':
        try:
            sys.stdout.reconfigure(encoding='utf-8', errors='replace')
        except AttributeError:
            pass  # Python < 3.7


def make_rng(seed: int, stream: int) -> np.random.Generator:
    """
    Create a PCG64 generator for one named stream of an explicit seed.

    Args:
        seed: User-supplied seed (never drawn from the environment).
        stream: One of the STREAM_* constants.

    Returns:
        A numpy Generator whose sequence depends only on (seed, stream).

    Example:
        >>> rng = make_rng(7, STREAM_MASKS)
        >>> rng.integers(0, 8)
    """
    sequence = np.random.SeedSequence([int(seed), int(stream)])
    return np.random.Generator(np.random.PCG64(sequence))


def voxel_chunks(n_voxels: int, chunk_size: int = DEFAULT_CHUNK_SIZE) -> List[slice]:
    """Split range(n_voxels) into contiguous slices of at most chunk_size."""
    chunk_size = max(1, int(chunk_size))
    return [slice(start, min(start + chunk_size, n_voxels))
            for start in range(0, n_voxels, chunk_size)]


def map_voxel_chunks(
    func: Callable[[slice], T],
    n_voxels: int,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    workers: int = 1,
) -> List[T]:
    """
    Apply func to every voxel chunk, optionally on a thread pool.

    Results come back in chunk order regardless of completion order, so the
    caller's reduction is independent of scheduling.

    Args:
        func: Callable receiving a slice over the voxel axis.
        n_voxels: Total number of voxels.
        chunk_size: Maximum voxels per chunk.
        workers: Thread pool size; 1 runs inline.

    Returns:
        List of per-chunk results, ordered by chunk.
    """
    chunks = voxel_chunks(n_voxels, chunk_size)
    if workers <= 1 or len(chunks) <= 1:
        return [func(chunk) for chunk in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, chunks))


def sha256_file(path: str) -> str:
    """Return the hex SHA-256 digest of a file."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_atomic(path: str, payload: bytes) -> str:
    """
    Write bytes to path via a temporary file and rename.

    An interrupted write never leaves a partially written target behind.

    Returns:
        The path written.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    return path


def write_text_atomic(path: str, text: str) -> str:
    """UTF-8 text variant of write_atomic."""
    return write_atomic(path, text.encode("utf-8"))

