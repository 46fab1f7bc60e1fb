"""Most-significant-bit slicing of nested integer codes.

A c-bit parent code is reduced to r bits by a rounding right shift:
halves carry into the next bucket instead of truncating toward zero, and
the result is clamped to the r-bit range. Sliced layers stay on the
parent grid with the scale multiplied by 2^(c-r).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import BitWidthSet, GridError, QuantGrid


class SliceError(ValueError):
    pass


def _check_slice_args(c: int, r: int) -> None:
    if not 2 <= c <= 8:
        raise SliceError("master bit-width must lie in [2, 8]")
    if r > c:
        raise SliceError("cannot slice %d bits out of %d" % (r, c))
    if r < 2:
        raise SliceError("target bit-width must be >= 2")


def slice_code(q, c: int, r: int):
    """Slice codes to r bits, expressed on the master grid.

    Returns clamp(round_half_away(q / 2^(c-r)), 0, 2^r - 1) * 2^(c-r),
    computed in exact integer arithmetic. Accepts scalars or arrays.
    """
    _check_slice_args(c, r)
    q = np.asarray(q, dtype=np.int64)
    if (q < 0).any() or (q > (1 << c) - 1).any():
        raise SliceError("code out of range for bit-width %d" % c)
    k = c - r
    if k == 0:
        return q if q.ndim else int(q)
    # round-half-away == round-half-up for non-negative values
    sliced = (q + (1 << (k - 1))) >> k
    sliced = np.minimum(sliced, (1 << r) - 1)
    out = sliced << k
    return out if out.ndim else int(out)


def slice_to_code(q, c: int, r: int):
    """Slice codes to r bits as plain r-bit integers in [0, 2^r - 1]."""
    out = np.asarray(slice_code(q, c, r)) >> (c - r)
    return out if out.ndim else int(out)


@dataclass
class NestedLayer:
    """Parent codes at the master bit-width plus their grid."""

    name: str
    codes: np.ndarray  # uint8, (d_row, d_col)
    grid: QuantGrid
    bits: BitWidthSet

    def __post_init__(self):
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint8)
        if self.codes.ndim != 2:
            raise SliceError("codes must be a matrix")
        c = self.grid.master_bits
        if self.bits.master != c:
            raise SliceError("bit-width set master does not match grid")
        if (self.codes > (1 << c) - 1).any():
            raise SliceError("code out of range for bit-width %d" % c)
        d_row, d_col = self.codes.shape
        if self.grid.scales.shape != (d_row, self.grid.n_groups_for(d_col)):
            raise SliceError("grid shape inconsistent with codes")

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    @property
    def param_count(self) -> int:
        return self.codes.shape[0] * self.codes.shape[1]

    def dense(self) -> np.ndarray:
        """Dequantized master-bit weights as float64."""
        from .grid import dequant

        return dequant(self.codes, self.grid, self.grid.master_bits)


@dataclass
class SlicedLayer:
    """An r-bit child view: r-bit codes with effective (rescaled) scales."""

    name: str
    bits: int
    codes: np.ndarray  # uint8, (d_row, d_col)
    scales: np.ndarray  # float32, (d_row, n_groups), already * 2^(c-r)
    group_size: int
    master_bits: int  # provenance: parent bit-width this was sliced from

    @property
    def zero_code(self) -> int:
        return 1 << (self.bits - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def column_scales(self) -> np.ndarray:
        idx = np.arange(self.codes.shape[1]) // self.group_size
        return self.scales[:, idx].astype(np.float64)

    def dense(self) -> np.ndarray:
        """Dequantized weights as float64."""
        return self.column_scales() * (self.codes.astype(np.int64) - self.zero_code)


def slice_layer(layer: NestedLayer, r: int) -> SlicedLayer:
    """Slice a parent layer down to r bits (r = master is the identity)."""
    c = layer.grid.master_bits
    _check_slice_args(c, r)
    codes = slice_to_code(layer.codes, c, r).astype(np.uint8)
    scales = layer.grid.scales * np.float32(1 << (c - r))  # exact: power of two
    return SlicedLayer(
        name=layer.name,
        bits=r,
        codes=codes,
        scales=scales,
        group_size=layer.grid.group_size,
        master_bits=c,
    )


@dataclass
class BitConfig:
    """Per-layer bit-width assignment under an exact parameter-bit budget."""

    assignment: dict[str, int]
    ladder: tuple[int, ...] = (2, 3, 4, 6, 8)
    budget_bits: int = 0

    def __post_init__(self):
        self.ladder = tuple(sorted(set(int(x) for x in self.ladder)))
        for name, r in self.assignment.items():
            if r not in self.ladder:
                raise SliceError("bit-width %d for %r not on the ladder" % (r, name))

    @classmethod
    def uniform(cls, layer_names, r: int, ladder=(2, 3, 4, 6, 8), sizes=None) -> "BitConfig":
        assignment = {name: r for name in layer_names}
        budget = sum(sizes[n] * r for n in layer_names) if sizes else 0
        return cls(assignment=assignment, ladder=ladder, budget_bits=budget)

    def total_bits(self, sizes: dict[str, int]) -> int:
        return sum(sizes[name] * r for name, r in self.assignment.items())

    def key(self) -> tuple:
        return tuple(sorted(self.assignment.items()))


def slice_model(checkpoint, config) -> dict[str, SlicedLayer]:
    """Slice every layer of a parent checkpoint per the config.

    ``config`` is a BitConfig, a {name: bits} mapping, or a single int
    applied uniformly. Missing layers raise.
    """
    if isinstance(config, BitConfig):
        assignment = config.assignment
    elif isinstance(config, dict):
        assignment = config
    else:
        assignment = {layer.name: int(config) for layer in checkpoint.layers}
    out = {}
    for layer in checkpoint.layers:
        if layer.name not in assignment:
            raise SliceError("incomplete config: missing %r" % layer.name)
        out[layer.name] = slice_layer(layer, assignment[layer.name])
    return out
