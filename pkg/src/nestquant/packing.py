"""Bit-plane storage for 2/3/4-bit codes.

Columns are padded to a multiple of 32 and split into 32-weight pack
units. Per unit:

  base_plane  one uint64 word; weight i holds its two lowest code bits
              at positions [2i, 2i+1]
  plane_b2    one uint32 word (bit i = code bit 2), present iff bits >= 3
  plane_b3    one uint32 word (bit i = code bit 3), present iff bits == 4

Pad weights store code 0. Storage is exactly bits * padded_weights / 8
bytes; all three bit-widths share the same base layout, so a 4-bit tensor
degrades to 3- or 2-bit by rounding-slicing the codes and dropping a
plane. The canonical layout keeps words row-major per plane; the
interleaved layout stores each plane unit-major (column blocks
contiguous) for kernels that sweep units across rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .slicing import slice_to_code

PACK_UNIT = 32


class PackError(ValueError):
    pass


def _padded_cols(d_col: int) -> int:
    return -(-d_col // PACK_UNIT) * PACK_UNIT


@dataclass
class PackedTensor:
    bits: int
    shape: tuple[int, int]
    base_plane: np.ndarray  # uint64, (d_row, n_units)
    plane_b2: np.ndarray | None = None  # uint32, (d_row, n_units)
    plane_b3: np.ndarray | None = None  # uint32, (d_row, n_units)
    layout: str = "canonical"

    def __post_init__(self):
        if self.bits not in (2, 3, 4):
            raise PackError("unsupported bits")
        if self.layout not in ("canonical", "interleaved"):
            raise PackError("unknown layout %r" % self.layout)
        d_row, d_col = self.shape
        n_units = _padded_cols(d_col) // PACK_UNIT
        want = (d_row, n_units) if self.layout == "canonical" else (n_units, d_row)
        if self.base_plane.dtype != np.uint64 or self.base_plane.shape != want:
            raise PackError("corrupted plane lengths")
        for plane, needed in ((self.plane_b2, self.bits >= 3), (self.plane_b3, self.bits == 4)):
            if needed:
                if plane is None or plane.dtype != np.uint32 or plane.shape != want:
                    raise PackError("corrupted plane lengths")
            elif plane is not None:
                raise PackError("corrupted plane lengths")

    @property
    def n_units(self) -> int:
        return _padded_cols(self.shape[1]) // PACK_UNIT

    @property
    def payload_bytes(self) -> int:
        total = self.base_plane.nbytes
        for plane in (self.plane_b2, self.plane_b3):
            if plane is not None:
                total += plane.nbytes
        return total


_SHIFTS2 = (2 * np.arange(PACK_UNIT, dtype=np.uint64))
_SHIFTS1 = np.arange(PACK_UNIT, dtype=np.uint32)


def pack(codes: np.ndarray, bits: int) -> PackedTensor:
    """Pack integer codes into bit planes (canonical layout)."""
    if bits not in (2, 3, 4):
        raise PackError("unsupported bits")
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise PackError("codes must be a matrix")
    if (codes < 0).any() or (codes >= (1 << bits)).any():
        raise PackError("code overflow for %d bits" % bits)
    d_row, d_col = codes.shape
    padded = _padded_cols(d_col)
    full = np.zeros((d_row, padded), dtype=np.uint64)
    full[:, :d_col] = codes.astype(np.uint64)
    units = full.reshape(d_row, padded // PACK_UNIT, PACK_UNIT)

    base = np.bitwise_or.reduce((units & np.uint64(3)) << _SHIFTS2, axis=2)
    plane_b2 = plane_b3 = None
    if bits >= 3:
        b = ((units >> np.uint64(2)) & np.uint64(1)).astype(np.uint32)
        plane_b2 = np.bitwise_or.reduce(b << _SHIFTS1, axis=2)
    if bits == 4:
        b = ((units >> np.uint64(3)) & np.uint64(1)).astype(np.uint32)
        plane_b3 = np.bitwise_or.reduce(b << _SHIFTS1, axis=2)
    return PackedTensor(
        bits=bits,
        shape=(d_row, d_col),
        base_plane=base,
        plane_b2=plane_b2,
        plane_b3=plane_b3,
    )


def unpack(p: PackedTensor) -> np.ndarray:
    """Inverse of pack; returns uint8 codes at the logical shape."""
    d_row, d_col = p.shape
    if p.layout != "canonical":
        p = to_canonical(p)
    units = (p.base_plane[:, :, None] >> _SHIFTS2) & np.uint64(3)
    codes = units.astype(np.uint8)
    if p.plane_b2 is not None:
        bit = (p.plane_b2[:, :, None] >> _SHIFTS1) & np.uint32(1)
        codes |= (bit << 2).astype(np.uint8)
    if p.plane_b3 is not None:
        bit = (p.plane_b3[:, :, None] >> _SHIFTS1) & np.uint32(1)
        codes |= (bit << 3).astype(np.uint8)
    return codes.reshape(d_row, -1)[:, :d_col]


def pack_slice(p: PackedTensor, r: int) -> PackedTensor:
    """Rounding-slice a packed 4-bit tensor down to r bits.

    Equivalent to unpack -> slice -> repack; codes carry into higher
    buckets on rounding, so this is not a plane drop.
    """
    if p.bits != 4:
        raise PackError("pack_slice expects a 4-bit tensor")
    if r > p.bits:
        raise PackError("cannot slice %d bits out of %d" % (r, p.bits))
    if r not in (2, 3, 4):
        raise PackError("unsupported bits")
    return pack(slice_to_code(unpack(p), 4, r), r)


def to_interleaved(p: PackedTensor) -> PackedTensor:
    """Reorder planes unit-major for kernels sweeping units across rows."""
    if p.layout == "interleaved":
        return p
    return PackedTensor(
        bits=p.bits,
        shape=p.shape,
        base_plane=np.ascontiguousarray(p.base_plane.T),
        plane_b2=None if p.plane_b2 is None else np.ascontiguousarray(p.plane_b2.T),
        plane_b3=None if p.plane_b3 is None else np.ascontiguousarray(p.plane_b3.T),
        layout="interleaved",
    )


def to_canonical(p: PackedTensor) -> PackedTensor:
    if p.layout == "canonical":
        return p
    return PackedTensor(
        bits=p.bits,
        shape=p.shape,
        base_plane=np.ascontiguousarray(p.base_plane.T),
        plane_b2=None if p.plane_b2 is None else np.ascontiguousarray(p.plane_b2.T),
        plane_b3=None if p.plane_b3 is None else np.ascontiguousarray(p.plane_b3.T),
        layout="canonical",
    )
