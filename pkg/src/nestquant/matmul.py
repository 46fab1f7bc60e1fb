"""Matmul over packed weights with on-the-fly dequantization.

matmul_ref is the accuracy oracle: it dequantizes the whole layer and
accumulates in float32 in fixed k-ascending order, which makes it slow
and bit-deterministic. matmul_packed is the production path; it runs on
the compiled kernels when present and on the numpy fallback otherwise.
bench times packed against a single-threaded dense float32 baseline and
reports effective memory traffic.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import kernels
from .packing import PackedTensor, _padded_cols, pack, to_canonical
from .slicing import SlicedLayer


class MatmulError(ValueError):
    pass


@dataclass
class PackedLayer:
    """Inference-ready layer: packed r-bit codes plus effective scales."""

    name: str
    packed: PackedTensor
    scales: np.ndarray  # float32, (d_row, n_groups)
    group_size: int

    def __post_init__(self):
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float32)

    @property
    def bits(self) -> int:
        return self.packed.bits

    @property
    def zero_code(self) -> int:
        return 1 << (self.bits - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.packed.shape

    @classmethod
    def from_sliced(cls, layer: SlicedLayer) -> "PackedLayer":
        if layer.bits not in (2, 3, 4):
            raise MatmulError("unsupported bits")
        return cls(
            name=layer.name,
            packed=pack(layer.codes, layer.bits),
            scales=layer.scales,
            group_size=layer.group_size,
        )

    def dense_f32(self) -> np.ndarray:
        from .packing import unpack

        codes = unpack(self.packed)
        idx = np.arange(codes.shape[1]) // self.group_size
        return (codes.astype(np.float32) - np.float32(self.zero_code)) * self.scales[:, idx]


@dataclass
class MatmulTask:
    X: np.ndarray  # float32, (batch, d_col)
    layer: PackedLayer

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float32)
        if self.X.ndim != 2:
            raise MatmulError("activations must be (batch, d_col)")
        if self.X.shape[1] != self.layer.shape[1]:
            raise MatmulError("shape mismatch")


def matmul_ref(task: MatmulTask) -> np.ndarray:
    """Dense reference: float32 accumulation in k-ascending order. O(b*m*k) python-side; oracle only."""
    Wd = task.layer.dense_f32()
    batch = task.X.shape[0]
    Y = np.zeros((batch, Wd.shape[0]), dtype=np.float32)
    for k in range(Wd.shape[1]):
        Y += task.X[:, k][:, None] * Wd[:, k][None, :]
    return Y


def _pad_activations(X: np.ndarray, padded: int) -> np.ndarray:
    if X.shape[1] == padded:
        return np.ascontiguousarray(X, dtype=np.float32)
    Xp = np.zeros((X.shape[0], padded), dtype=np.float32)
    Xp[:, : X.shape[1]] = X
    return Xp


def matmul_packed(task: MatmulTask, force_fallback: bool = False) -> np.ndarray:
    """Packed matmul; scalar-inner row sweeps below batch 8, blocked above."""
    layer = task.layer
    if layer.bits not in (2, 3, 4):
        raise MatmulError("unsupported bits")
    if layer.group_size % 32 != 0:
        raise MatmulError("group size must be a multiple of 32")
    p = to_canonical(layer.packed)
    Xp = _pad_activations(task.X, p.n_units * 32)
    if kernels.HAVE_COMPILED and not force_fallback:
        return kernels._core.packed_matmul(
            p.base_plane, p.plane_b2, p.plane_b3, layer.scales, Xp,
            layer.bits, layer.group_size,
        )
    return kernels.fallback.packed_matmul(
        p.base_plane, p.plane_b2, p.plane_b3, layer.scales, Xp,
        layer.bits, layer.group_size,
    )


def random_task(m: int, k: int, batch: int, bits: int, group_size: int = 128,
                seed: int = 0) -> MatmulTask:
    """Seeded random packed layer + activations (bench and test input)."""
    if bits not in (2, 3, 4):
        raise MatmulError("unsupported bits")
    rng = np.random.default_rng(seed)
    codes = rng.integers(0, 1 << bits, size=(m, k), dtype=np.int64)
    n_groups = -(-k // group_size)
    scales = rng.uniform(0.005, 0.02, size=(m, n_groups)).astype(np.float32)
    layer = PackedLayer(name="bench", packed=pack(codes, bits), scales=scales,
                        group_size=group_size)
    X = rng.standard_normal((batch, k)).astype(np.float32)
    return MatmulTask(X=X, layer=layer)


def _time_ns(fn, reps: int) -> tuple[int, list[int]]:
    fn()  # warm-up
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return int(statistics.median(samples)), samples


def bench(m: int, k: int, batch: int, bits: int, reps: int = 7,
          group_size: int = 128, seed: int = 0) -> list[dict]:
    """Time packed matmul against the dense float32 single-thread baseline.

    Returns one record per backend (compiled and fallback when both are
    available), each carrying traffic accounting and the speedup over the
    dense baseline.
    """
    if reps < 3:
        raise MatmulError("reps must be >= 3")
    if bits not in (2, 3, 4):
        raise MatmulError("unsupported bits")
    task = random_task(m, k, batch, bits, group_size=group_size, seed=seed)
    Wd = task.layer.dense_f32()
    X = task.X

    with threadpool_limits(limits=1):
        dense_ns, _ = _time_ns(lambda: X @ Wd.T, reps)

    weight_bytes = task.layer.packed.payload_bytes
    bytes_moved = weight_bytes + X.nbytes + 4 * batch * m

    records = []
    modes = [(kernels.backend_name(), False)]
    if kernels.HAVE_COMPILED:
        modes.append(("fallback", True))
    for backend, force in modes:
        median_ns, samples = _time_ns(
            lambda force=force: matmul_packed(task, force_fallback=force), reps
        )
        records.append({
            "m": m,
            "k": k,
            "batch": batch,
            "bits": bits,
            "median_ns": median_ns,
            "gbps": bytes_moved / median_ns if median_ns else 0.0,
            "speedup": dense_ns / median_ns if median_ns else 0.0,
            "backend": backend,
            "weight_bytes": weight_bytes,
            "bytes_moved": bytes_moved,
            "dense_median_ns": dense_ns,
            "samples_ns": samples,
        })
    return records
