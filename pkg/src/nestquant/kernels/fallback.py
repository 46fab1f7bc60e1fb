"""Pure-numpy packed matmul, used when the extension is unavailable.

Dequantizes row blocks to float32 and leans on BLAS; same contract as the
compiled path, an order of magnitude slower on large shapes.
"""

from __future__ import annotations

import numpy as np

_ROW_BLOCK = 512


def _unpack_units(base, b2, b3):
    shifts2 = 2 * np.arange(32, dtype=np.uint64)
    shifts1 = np.arange(32, dtype=np.uint32)
    codes = ((base[:, :, None] >> shifts2) & np.uint64(3)).astype(np.int32)
    if b2 is not None:
        codes |= (((b2[:, :, None] >> shifts1) & np.uint32(1)) << 2).astype(np.int32)
    if b3 is not None:
        codes |= (((b3[:, :, None] >> shifts1) & np.uint32(1)) << 3).astype(np.int32)
    return codes.reshape(base.shape[0], -1)


def packed_matmul(base, b2, b3, scales, Xp, bits, group_size):
    batch = Xp.shape[0]
    m = base.shape[0]
    padded = base.shape[1] * 32
    z = np.float32(1 << (bits - 1))
    group_idx = np.minimum(np.arange(padded) // group_size, scales.shape[1] - 1)
    out = np.empty((batch, m), dtype=np.float32)
    for lo in range(0, m, _ROW_BLOCK):
        hi = min(lo + _ROW_BLOCK, m)
        codes = _unpack_units(
            base[lo:hi],
            None if b2 is None else b2[lo:hi],
            None if b3 is None else b3[lo:hi],
        )
        dense = (codes.astype(np.float32) - z) * scales[lo:hi][:, group_idx]
        out[:, lo:hi] = Xp @ dense.T
    return out
