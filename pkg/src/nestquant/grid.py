"""Symmetric group-wise quantization grids.

Weights are mapped to unsigned integer codes in [0, 2^c - 1] around a
symmetric zero code z = 2^(c-1). Codes are shared by every target
bit-width: an r-bit model reuses the same grid with the scale blown up by
2^(c-r). Scales live per (row, group) where a group is a contiguous run
of input-dimension weights. Scale selection is a shrink search over the
max-abs baseline, scored by the weighted multi-bit reconstruction error
so that one grid serves all target bit-widths at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Degenerate (all-zero) groups get this scale instead of zero.
SCALE_FLOOR = 1e-12


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class BitWidthSet:
    """Target bit-widths and their importance weights.

    ``targets`` is sorted ascending; the largest entry is the master
    bit-width that codes are stored at. ``weights[i]`` is the importance
    of ``targets[i]`` in the multi-bit objective.
    """

    targets: tuple[int, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        targets = tuple(int(r) for r in self.targets)
        weights = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "weights", weights)
        if not targets:
            raise GridError("empty bit-width set")
        if len(weights) != len(targets):
            raise GridError("lambda/bits length mismatch")
        if list(targets) != sorted(set(targets)):
            raise GridError("bit-widths must be distinct and sorted")
        if targets[0] < 2 or targets[-1] > 8:
            raise GridError("bit-widths must lie in [2, 8]")
        for w in weights:
            if not math.isfinite(w) or w <= 0.0:
                raise GridError("importance weights must be positive and finite")

    @property
    def master(self) -> int:
        return self.targets[-1]

    def weight_of(self, r: int) -> float:
        return self.weights[self.targets.index(r)]

    @classmethod
    def uniform(cls, targets) -> "BitWidthSet":
        targets = tuple(sorted(set(int(r) for r in targets)))
        return cls(targets, (1.0,) * len(targets))


@dataclass
class QuantGrid:
    """Per-(row, group) scales for one layer at master bit-width ``master_bits``."""

    master_bits: int
    group_size: int
    scales: np.ndarray  # float32, (d_row, n_groups)

    def __post_init__(self):
        if not 2 <= self.master_bits <= 8:
            raise GridError("master bit-width must lie in [2, 8]")
        if self.group_size < 1:
            raise GridError("group size must be positive")
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float32)
        if self.scales.ndim != 2:
            raise GridError("scales must be (d_row, n_groups)")
        if not (self.scales >= np.float32(SCALE_FLOOR)).all():
            raise GridError("scales must be >= the scale floor")

    @property
    def zero_code(self) -> int:
        return 1 << (self.master_bits - 1)

    def n_groups_for(self, d_col: int) -> int:
        return -(-d_col // self.group_size)

    def column_scales(self, d_col: int) -> np.ndarray:
        """Expand group scales to one float64 scale per column."""
        idx = np.arange(d_col) // self.group_size
        return self.scales[:, idx].astype(np.float64)


def base_scale(max_abs: float, c: int) -> float:
    """Max-abs scale so that +max_abs lands on the top code 2^c - 1."""
    if not 2 <= c <= 8:
        raise GridError("bit-width must lie in [2, 8]")
    return max(float(max_abs) / ((1 << (c - 1)) - 1), SCALE_FLOOR)


def round_half_away(x):
    """Round to nearest with halves away from zero (vectorized)."""
    x = np.asarray(x)
    return np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5))


def rtn(w, scale, c: int):
    """Round-to-nearest projection onto the c-bit grid.

    Returns integer codes in [0, 2^c - 1]; accepts scalars or arrays.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.isfinite(w).all():
        raise GridError("non-finite weight")
    z = 1 << (c - 1)
    q = round_half_away(w / np.asarray(scale, dtype=np.float64) + z)
    q = np.clip(q, 0, (1 << c) - 1).astype(np.int64)
    return q if q.ndim else int(q)


def dequant_value(code, scale, c: int, r: int):
    """Dequantize r-bit codes living on the master-c grid.

    ``scale`` is the master-bit scale; the effective r-bit scale is
    ``scale * 2^(c-r)`` and the r-bit zero code is 2^(r-1).
    """
    code = np.asarray(code)
    if (code < 0).any() or (code > (1 << r) - 1).any():
        raise GridError("code out of range for bit-width %d" % r)
    step = 1 << (c - r)
    z_r = 1 << (r - 1)
    out = np.asarray(scale, dtype=np.float64) * (step * (code.astype(np.int64) - z_r))
    return out if out.ndim else float(out)


def dequant(codes, grid: QuantGrid, r: int) -> np.ndarray:
    """Dequantize a full layer of r-bit codes using the layer grid."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise GridError("codes must be a matrix")
    scales = grid.column_scales(codes.shape[1])
    return dequant_value(codes, scales, grid.master_bits, r)


def _slice_master_values(c: int, r: int) -> np.ndarray:
    """Master-grid offsets (S(q, r) - z) for every code q, as int64."""
    from .slicing import slice_code  # local import: slicing depends on this module

    q = np.arange(1 << c, dtype=np.int64)
    return slice_code(q, c, r) - (1 << (c - 1))


def fit_grid(
    W: np.ndarray,
    bits: BitWidthSet,
    group_size: int,
    shrink_min: float = 0.5,
    steps: int = 51,
) -> QuantGrid:
    """Shrink-search MSE-optimal group scales for the multi-bit objective.

    For every (row, group) the candidate scales are alpha * base_scale
    with alpha descending from 1 to ``shrink_min`` over ``steps`` points;
    the candidate minimizing sum_r lambda_r * sum_w (w - dq_r(w))^2 wins,
    ties going to the larger alpha.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] == 0:
        raise GridError("weights must be a non-empty matrix")
    if not np.isfinite(W).all():
        raise GridError("non-finite weight")
    if steps < 1:
        raise GridError("steps must be >= 1")
    c = bits.master
    z = 1 << (c - 1)
    qmax = (1 << c) - 1
    d_row, d_col = W.shape
    n_groups = -(-d_col // group_size)
    alphas = np.linspace(1.0, shrink_min, steps)
    mvals = {r: _slice_master_values(c, r) for r in bits.targets}

    scales = np.empty((d_row, n_groups), dtype=np.float64)
    # Keep the (steps, rows, group) working set bounded.
    row_block = max(1, (1 << 22) // max(1, steps * group_size))
    for g in range(n_groups):
        lo, hi = g * group_size, min((g + 1) * group_size, d_col)
        Wg = W[:, lo:hi]
        base = np.maximum(
            np.abs(Wg).max(axis=1) / ((1 << (c - 1)) - 1), SCALE_FLOOR
        )
        for r0 in range(0, d_row, row_block):
            r1 = min(r0 + row_block, d_row)
            cand = alphas[:, None] * base[None, r0:r1]  # (steps, rows)
            s3 = cand[:, :, None]
            q = round_half_away(Wg[None, r0:r1, :] / s3 + z)
            q = np.clip(q, 0, qmax).astype(np.int64)
            obj = np.zeros(cand.shape)
            for r, lam in zip(bits.targets, bits.weights):
                dq = s3 * mvals[r][q]
                obj += lam * ((Wg[None, r0:r1, :] - dq) ** 2).sum(axis=2)
            best = obj.argmin(axis=0)  # first minimum = largest alpha
            scales[r0:r1, g] = cand[best, np.arange(r1 - r0)]

    scales32 = np.maximum(scales.astype(np.float32), np.float32(SCALE_FLOOR))
    return QuantGrid(master_bits=c, group_size=group_size, scales=scales32)
