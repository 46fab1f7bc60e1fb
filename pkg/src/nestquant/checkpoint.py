"""Binary container for nested-quantized models.

Little-endian throughout; magic "MQPT", version 1. The header records the
quantization recipe (master bits, target set, lambdas, group size,
dampening); each layer record carries its own bit-width so the same
container holds both parent checkpoints (every layer at the master
bit-width) and sliced models (per-layer bit-widths from a config).
Codes are bit-plane packed when the layer bit-width is <= 4 and stored
one byte per code otherwise. Every variable-length section is preceded
by its byte length. See docs/format.md for the exact layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .grid import BitWidthSet, QuantGrid
from .packing import PACK_UNIT, PackedTensor, _padded_cols, pack, unpack
from .slicing import NestedLayer, SlicedLayer

MAGIC = b"MQPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    """A parent model: every layer holds master-bit codes."""

    bits: BitWidthSet
    group_size: int
    damp_rel: float
    layers: list[NestedLayer] = field(default_factory=list)

    @property
    def master_bits(self) -> int:
        return self.bits.master

    def layer_sizes(self) -> dict[str, int]:
        return {ly.name: ly.param_count for ly in self.layers}

    def layer(self, name: str) -> NestedLayer:
        for ly in self.layers:
            if ly.name == name:
                return ly
        raise KeyError(name)


@dataclass
class SlicedModel:
    """A deployable child: per-layer bit-widths, effective scales."""

    master_bits: int
    bits: BitWidthSet
    group_size: int
    damp_rel: float
    layers: list[SlicedLayer] = field(default_factory=list)


def _code_sections(codes: np.ndarray, layer_bits: int) -> list[bytes]:
    if layer_bits <= 4:
        p = pack(codes, layer_bits)
        planes = [p.base_plane.tobytes()]
        if p.plane_b2 is not None:
            planes.append(p.plane_b2.tobytes())
        if p.plane_b3 is not None:
            planes.append(p.plane_b3.tobytes())
        return planes
    return [np.ascontiguousarray(codes, dtype=np.uint8).tobytes()]


def write_checkpoint(model: Checkpoint | SlicedModel, path) -> None:
    if isinstance(model, Checkpoint):
        master = model.master_bits
        per_layer_bits = [master] * len(model.layers)
    else:
        master = model.master_bits
        per_layer_bits = [ly.bits for ly in model.layers]
    bits = model.bits

    out = bytearray()
    out += MAGIC
    out += struct.pack("<HBB", VERSION, master, len(bits.targets))
    out += struct.pack("<%dB" % len(bits.targets), *bits.targets)
    out += struct.pack("<%df" % len(bits.weights), *bits.weights)
    out += struct.pack("<LfL", model.group_size, model.damp_rel, len(model.layers))

    for ly, lb in zip(model.layers, per_layer_bits):
        name = ly.name.encode("utf-8")
        d_row, d_col = ly.shape
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<LLB", d_row, d_col, lb)
        scales = ly.grid.scales if isinstance(ly, NestedLayer) else ly.scales
        blob = np.ascontiguousarray(scales, dtype=np.float32).tobytes()
        out += struct.pack("<Q", len(blob)) + blob
        out += struct.pack("<B", 1 if lb <= 4 else 0)
        for section in _code_sections(ly.codes, lb):
            out += struct.pack("<Q", len(section)) + section

    with open(path, "wb") as fh:
        fh.write(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("corrupt checkpoint")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> bool:
        return self.pos == len(self.buf)


def _read_section(rd: _Reader, dtype, shape) -> np.ndarray:
    (length,) = rd.unpack("<Q")
    want = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if length != want:
        raise CheckpointError("corrupt checkpoint")
    return np.frombuffer(rd.take(length), dtype=dtype).reshape(shape).copy()


def read_checkpoint(path) -> Checkpoint | SlicedModel:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())

    if rd.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint")
    (version,) = rd.unpack("<H")
    if version != VERSION:
        raise CheckpointError("unsupported version")
    master, n_targets = rd.unpack("<BB")
    targets = rd.unpack("<%dB" % n_targets)
    lambdas = rd.unpack("<%df" % n_targets)
    group_size, damp_rel, layer_count = rd.unpack("<LfL")
    bits = BitWidthSet(tuple(targets), tuple(lambdas))
    if bits.master != master:
        raise CheckpointError("corrupt checkpoint")

    records = []
    for _ in range(layer_count):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode("utf-8")
        d_row, d_col, lb = rd.unpack("<LLB")
        n_groups = -(-d_col // group_size)
        scales = _read_section(rd, np.float32, (d_row, n_groups))
        (kind,) = rd.unpack("<B")
        if kind == 1:
            if lb > 4:
                raise CheckpointError("corrupt checkpoint")
            n_units = _padded_cols(d_col) // PACK_UNIT
            base = _read_section(rd, np.uint64, (d_row, n_units))
            b2 = _read_section(rd, np.uint32, (d_row, n_units)) if lb >= 3 else None
            b3 = _read_section(rd, np.uint32, (d_row, n_units)) if lb == 4 else None
            codes = unpack(
                PackedTensor(bits=lb, shape=(d_row, d_col), base_plane=base,
                             plane_b2=b2, plane_b3=b3)
            )
        elif kind == 0:
            codes = _read_section(rd, np.uint8, (d_row, d_col))
        else:
            raise CheckpointError("corrupt checkpoint")
        records.append((name, lb, codes, scales))

    if not rd.done():
        raise CheckpointError("corrupt checkpoint")

    if all(lb == master for _, lb, _, _ in records):
        layers = [
            NestedLayer(
                name=name,
                codes=codes,
                grid=QuantGrid(master_bits=master, group_size=group_size, scales=scales),
                bits=bits,
            )
            for name, _, codes, scales in records
        ]
        return Checkpoint(bits=bits, group_size=group_size, damp_rel=damp_rel,
                          layers=layers)

    layers = [
        SlicedLayer(name=name, bits=lb, codes=codes, scales=scales,
                    group_size=group_size, master_bits=master)
        for name, lb, codes, scales in records
    ]
    return SlicedModel(master_bits=master, bits=bits, group_size=group_size,
                       damp_rel=damp_rel, layers=layers)
