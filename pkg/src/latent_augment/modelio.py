"""LDMN binary model format.

Layout (little-endian)::

    b"LDMN"  u16 version  u16 layer_count
    per layer: u32 d_in  u32 d_out  u8 activation  f64[d_in*d_out] weights  f64[d_out] biases
    u16 section_count
    per section: 4-byte tag  u64 length  payload

Trailing sections carry whatever a model type needs beyond its dense layers
(trunk/head split, embedding tables, standardization statistics, hashes).
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .nn import ACTIVATIONS, Layer

MAGIC = b"LDMN"
VERSION = 1


def dumps(layers: list[Layer], sections: dict[bytes, bytes] | None = None) -> bytes:
    sections = sections or {}
    parts = [MAGIC, struct.pack("<HH", VERSION, len(layers))]
    for layer in layers:
        parts.append(struct.pack("<IIB", layer.d_in, layer.d_out, ACTIVATIONS.index(layer.activation)))
        parts.append(layer.weight.astype("<f8").tobytes(order="C"))
        parts.append(layer.bias.astype("<f8").tobytes())
    parts.append(struct.pack("<H", len(sections)))
    for tag, payload in sections.items():
        if len(tag) != 4:
            raise ValueError(f"section tag must be 4 bytes: {tag!r}")
        parts.append(tag + struct.pack("<Q", len(payload)))
        parts.append(payload)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {self.what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes in {self.what}")


def loads(data: bytes) -> tuple[list[Layer], dict[bytes, bytes]]:
    r = _Reader(data, "model file")
    if r.take(4) != MAGIC:
        raise FormatError("not an LDMN model file (bad magic)")
    version, count = r.unpack("<HH")
    if version != VERSION:
        raise FormatError(f"unsupported LDMN version {version}")
    layers = []
    for _ in range(count):
        d_in, d_out, act = r.unpack("<IIB")
        if act >= len(ACTIVATIONS):
            raise FormatError(f"unknown activation code {act}")
        w = r.floats(d_in * d_out).reshape(d_in, d_out)
        b = r.floats(d_out)
        layers.append(Layer(w, b, ACTIVATIONS[act]))
    (n_sections,) = r.unpack("<H")
    sections = {}
    for _ in range(n_sections):
        tag = r.take(4)
        (length,) = r.unpack("<Q")
        sections[tag] = r.take(length)
    r.done()
    return layers, sections


def save(path: str | Path, layers: list[Layer], sections: dict[bytes, bytes] | None = None) -> None:
    Path(path).write_bytes(dumps(layers, sections))


def load(path: str | Path) -> tuple[list[Layer], dict[bytes, bytes]]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"model file not found: {path}") from exc
    return loads(data)


def require(sections: dict[bytes, bytes], tag: bytes) -> bytes:
    if tag not in sections:
        raise FormatError(f"model file lacks section {tag.decode()}")
    return sections[tag]
