"""FPVEC files: 8-byte magic ``FPVEC\\0\\0\\0``, uint64 length n, then n float64 (all little endian)."""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"FPVEC\x00\x00\x00"
_HEAD = struct.Struct("<8sQ")


class VectorFileError(ValueError):
    pass


def write_vector(path, v) -> None:
    v = np.ascontiguousarray(np.asarray(v, dtype=np.float64).ravel(), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, v.size))
        fh.write(v.tobytes())


def read_vector(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEAD.size:
        raise VectorFileError(f"{path}: too short for an FPVEC header")
    magic, n = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise VectorFileError(f"{path}: bad magic {magic!r}")
    if len(blob) != _HEAD.size + 8 * n:
        raise VectorFileError(f"{path}: header says {n} values, file holds {(len(blob) - _HEAD.size) / 8:g}")
    return np.frombuffer(blob, dtype="<f8", offset=_HEAD.size).astype(np.float64)


def read_samples(path, n: int) -> np.ndarray:
    """Read a vector file holding k*n values as a (k, n) array of samples."""
    v = read_vector(path)
    if v.size % n:
        raise VectorFileError(f"{path}: {v.size} values is not a multiple of n={n}")
    return v.reshape(-1, n)
