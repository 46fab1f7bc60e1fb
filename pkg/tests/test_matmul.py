import numpy as np
import pytest

from nestquant import kernels
from nestquant.matmul import (
    MatmulError,
    MatmulTask,
    PackedLayer,
    bench,
    matmul_packed,
    matmul_ref,
    random_task,
)
from nestquant.packing import pack

BACKENDS = [False] + ([True] if kernels.HAVE_COMPILED else [])


def _rel_err(got, want):
    return np.abs(got - want).max() / (np.abs(want).max() + 1e-30)


class TestMatmulRef:
    def test_identity_rows_give_weight_rows(self, rng):
        task = random_task(24, 32, 32, 3, group_size=32, seed=5)
        task.X[:] = np.eye(32, dtype=np.float32)
        assert _rel_err(matmul_ref(task), task.layer.dense_f32().T) < 1e-6

    def test_zero_input(self):
        task = random_task(8, 64, 2, 4, group_size=32, seed=1)
        task.X[:] = 0
        assert (matmul_ref(task) == 0).all()

    def test_matches_triple_loop(self):
        task = random_task(128, 256, 4, 3, group_size=128, seed=2)
        Wd = task.layer.dense_f32().astype(np.float64)
        X = task.X.astype(np.float64)
        want = np.zeros((4, 128))
        for b in range(4):
            for i in range(128):
                acc = 0.0
                for k in range(256):
                    acc += X[b, k] * Wd[i, k]
                want[b, i] = acc
        assert _rel_err(matmul_ref(task).astype(np.float64), want) < 1e-6

    def test_shape_mismatch_rejected(self):
        task = random_task(8, 64, 2, 4, seed=0)
        with pytest.raises(MatmulError, match="shape mismatch"):
            MatmulTask(X=np.zeros((2, 63), dtype=np.float32), layer=task.layer)


@pytest.mark.parametrize("force_fallback", BACKENDS)
class TestMatmulPacked:
    def test_identity_rows(self, force_fallback):
        task = random_task(16, 32, 32, 4, group_size=32, seed=3)
        task.X[:] = np.eye(32, dtype=np.float32)
        got = matmul_packed(task, force_fallback=force_fallback)
        assert _rel_err(got, task.layer.dense_f32().T) < 1e-4

    def test_zero_code_exact_zero(self, force_fallback):
        for bits in (2, 3, 4):
            task = random_task(16, 96, 3, bits, group_size=32, seed=bits)
            z = 1 << (bits - 1)
            task.layer.packed = pack(np.full((16, 96), z), bits)
            assert (matmul_packed(task, force_fallback=force_fallback) == 0.0).all()

    @pytest.mark.parametrize("bits", [2, 3, 4])
    def test_agrees_with_ref_across_batches(self, bits, force_fallback):
        for batch in (1, 2, 7, 8, 9, 16):
            task = random_task(48, 160, batch, bits, group_size=32,
                               seed=100 * bits + batch)
            got = matmul_packed(task, force_fallback=force_fallback)
            assert _rel_err(got, matmul_ref(task)) < 1e-4

    def test_padding_path(self, force_fallback):
        # d_col not a multiple of 32: pad weights must not leak
        task = random_task(16, 40, 3, 4, group_size=32, seed=9)
        got = matmul_packed(task, force_fallback=force_fallback)
        assert _rel_err(got, matmul_ref(task)) < 1e-4

    def test_linearity(self, force_fallback):
        task = random_task(32, 128, 4, 3, group_size=64, seed=11)
        rng = np.random.default_rng(12)
        X2 = rng.standard_normal(task.X.shape).astype(np.float32)
        y1 = matmul_packed(task, force_fallback=force_fallback)
        y2 = matmul_packed(MatmulTask(X=X2, layer=task.layer),
                           force_fallback=force_fallback)
        y12 = matmul_packed(MatmulTask(X=task.X + X2, layer=task.layer),
                            force_fallback=force_fallback)
        assert _rel_err(y12, y1 + y2) < 1e-4

    def test_batch_rows_independent(self, force_fallback):
        task = random_task(24, 64, 12, 4, group_size=32, seed=13)
        full = matmul_packed(task, force_fallback=force_fallback)
        for b in range(12):
            single = matmul_packed(
                MatmulTask(X=task.X[b : b + 1], layer=task.layer),
                force_fallback=force_fallback,
            )
            assert _rel_err(single[0], full[b]) < 1e-4


class TestMatmulErrors:
    def test_misaligned_group_rejected(self, rng):
        codes = rng.integers(0, 16, size=(4, 64))
        layer = PackedLayer(name="x", packed=pack(codes, 4),
                            scales=np.full((4, 4), 0.1, dtype=np.float32),
                            group_size=16)
        task = MatmulTask(X=np.zeros((1, 64), dtype=np.float32), layer=layer)
        with pytest.raises(MatmulError, match="multiple of 32"):
            matmul_packed(task)

    def test_unsupported_bits_rejected(self):
        with pytest.raises(MatmulError, match="unsupported bits"):
            random_task(4, 32, 1, 5)


class TestBench:
    def test_record_fields_and_median(self):
        records = bench(64, 64, 2, 4, reps=5, seed=0)
        rec = records[0]
        for key in ("m", "k", "batch", "bits", "median_ns", "gbps", "speedup"):
            assert key in rec
        assert rec["median_ns"] == int(np.median(rec["samples_ns"]))
        assert len(rec["samples_ns"]) == 5

    def test_weight_bytes_ratio_half(self):
        r2 = bench(64, 128, 1, 2, reps=3, seed=0)[0]
        r4 = bench(64, 128, 1, 4, reps=3, seed=0)[0]
        assert r2["weight_bytes"] * 2 == r4["weight_bytes"]

    def test_reps_validated(self):
        with pytest.raises(MatmulError):
            bench(8, 32, 1, 4, reps=2)

    def test_unsupported_bits(self):
        with pytest.raises(MatmulError, match="unsupported bits"):
            bench(8, 32, 1, 5, reps=3)
