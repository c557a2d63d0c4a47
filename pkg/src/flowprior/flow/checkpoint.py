"""Binary checkpoint format for :class:`FlowStack`.

Layout (all little endian)::

    0..7    magic b"FLOWCKPT"
    8..11   version, uint32 (= 1)
    12..15  dimension n, uint32
    16      layer count L, uint8
    then per layer: uint8 kind tag (0 actnorm, 1 coupling, 2 mixing),
                    uint32 parameter count P,
                    P float64 parameters

Structural values (coupling parity and width, mixing permutation) are stored
as float64 entries at the head of each layer's parameter block.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .layers import ACTNORM, COUPLING, MIXING, ActNorm, Coupling, Mixing
from .stack import FlowStack

MAGIC = b"FLOWCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIIB")
_LAYER = struct.Struct("<BI")
_KINDS = {ACTNORM: ActNorm, COUPLING: Coupling, MIXING: Mixing}


class CheckpointError(ValueError):
    pass


class CheckpointHeaderError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointDimensionError(CheckpointError):
    pass


def to_bytes(G: FlowStack) -> bytes:
    if len(G.layers) > 255:
        raise CheckpointError("checkpoint format holds at most 255 layers")
    out = [_HEADER.pack(MAGIC, VERSION, G.n, len(G.layers))]
    for layer in G.layers:
        vec = np.ascontiguousarray(layer.pack(), dtype="<f8")
        out.append(_LAYER.pack(layer.kind, vec.size))
        out.append(vec.tobytes())
    return b"".join(out)


def from_bytes(blob: bytes, activation_clip: float = 40.0) -> FlowStack:
    if len(blob) < _HEADER.size:
        if not blob.startswith(MAGIC[: len(blob)]):
            raise CheckpointHeaderError("bad magic")
        raise CheckpointTruncatedError(f"file too short for header ({len(blob)} bytes)")
    magic, version, n, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointHeaderError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointHeaderError(f"unsupported checkpoint version {version}")
    if n < 1:
        raise CheckpointDimensionError("dimension must be positive")
    pos = _HEADER.size
    layers = []
    for i in range(count):
        if pos + _LAYER.size > len(blob):
            raise CheckpointTruncatedError(f"truncated before layer {i} header")
        kind, size = _LAYER.unpack_from(blob, pos)
        pos += _LAYER.size
        if kind not in _KINDS:
            raise CheckpointHeaderError(f"unknown layer kind {kind} at layer {i}")
        end = pos + 8 * size
        if end > len(blob):
            raise CheckpointTruncatedError(f"truncated inside layer {i} parameters")
        vec = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).astype(np.float64)
        pos = end
        try:
            layers.append(_KINDS[kind].unpack(n, vec))
        except ValueError as exc:
            raise CheckpointDimensionError(f"layer {i}: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last layer")
    return FlowStack(layers, n, activation_clip)


def save(G: FlowStack, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(G))
    os.replace(tmp, path)


def load(path, activation_clip: float = 40.0) -> FlowStack:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), activation_clip)
