import numpy as np
import pytest

from reference_gptq import reference_gptq

from nestquant.checkpoint import write_checkpoint
from nestquant.gptq import build_hessian
from nestquant.grid import BitWidthSet, fit_grid
from nestquant.harness import (
    CalibSet,
    HarnessError,
    ToyModel,
    analyze_routing,
    enumerate_block_configs,
    eval_kl,
    eval_recon,
    run_pipeline,
)


def _reference_pipeline(model, calib, c, group_size, damp, block):
    """Independent single-bit-width pipeline built on the reference quantizer."""
    bits = BitWidthSet((c,), (1.0,))
    work = dict(model.weights)
    z = 1 << (c - 1)
    codes_by = {}
    for name in model.order:
        X_in = model.layer_input(name, calib.calib, work)
        W = model.weights[name]
        grid = fit_grid(W, bits, group_size)
        H = build_hessian(X_in.T, damp)
        codes = reference_gptq(W, H, grid.scales, group_size, c, block)
        codes_by[name] = codes
        work[name] = grid.column_scales(W.shape[1]) * (codes - z)
    return codes_by


@pytest.fixture(scope="module")
def small_model():
    return ToyModel.create(seed=4, dim=32, n_blocks=2, vocab=16)


@pytest.fixture(scope="module")
def small_calib(small_model):
    return CalibSet.generate(4, small_model.dim, n_calib=384, n_heldout=96)


class TestToyModel:
    def test_deterministic_forward(self, small_model, small_calib):
        a = small_model.forward(small_calib.heldout)
        b = ToyModel.create(seed=4, dim=32, n_blocks=2, vocab=16).forward(
            small_calib.heldout
        )
        assert np.array_equal(a, b)

    def test_unique_layer_names(self, small_model):
        assert len(set(small_model.order)) == len(small_model.order)

    def test_layer_input_consistency(self, small_model, small_calib):
        X = small_calib.heldout[:8]
        h = small_model.layer_input("block1.attn_in", X)
        out = small_model.block_forward(1, h)
        assert np.allclose(out, small_model.layer_input("head", X), atol=0)

    def test_calib_splits_disjoint(self):
        cs = CalibSet.generate(0, 8, n_calib=10, n_heldout=10)
        assert not (cs.calib[:, None] == cs.heldout[None, :]).all(axis=2).any()


class TestRunPipeline:
    def test_single_target_matches_reference_pipeline(self, small_model,
                                                      small_calib):
        bits = BitWidthSet((8,), (1.0,))
        ckpt, _ = run_pipeline(small_model, small_calib, bits, group_size=32,
                               block_size=32)
        ref = _reference_pipeline(small_model, small_calib, 8, 32, 0.01, 32)
        for layer in ckpt.layers:
            assert np.array_equal(layer.codes.astype(np.int64), ref[layer.name])

    def test_checkpoint_bytes_deterministic(self, small_model, small_calib,
                                            tmp_path):
        bits = BitWidthSet((3, 4, 8), (1.0, 1.0, 1.0))
        p1, p2 = tmp_path / "a.mqpt", tmp_path / "b.mqpt"
        ck1, _ = run_pipeline(small_model, small_calib, bits, group_size=32)
        ck2, _ = run_pipeline(small_model, small_calib, bits, group_size=32)
        write_checkpoint(ck1, p1)
        write_checkpoint(ck2, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_single_sample_calibration(self, small_model):
        calib = CalibSet.generate(9, small_model.dim, n_calib=1, n_heldout=4)
        bits = BitWidthSet((4,), (1.0,))
        ckpt, _ = run_pipeline(small_model, calib, bits, group_size=32)
        assert len(ckpt.layers) == len(small_model.order)

    def test_quantized_activation_path_matters(self, small_model, small_calib):
        bits = BitWidthSet((3,), (1.0,))
        ck_q, _ = run_pipeline(small_model, small_calib, bits, group_size=32)
        ck_fp, _ = run_pipeline(small_model, small_calib, bits, group_size=32,
                                activations="fp")
        differs = any(
            not np.array_equal(a.codes, b.codes)
            for a, b in zip(ck_q.layers, ck_fp.layers)
        )
        assert differs

    def test_diagnostics_match_eval_recon(self, small_model, small_calib):
        bits = BitWidthSet((3, 8), (1.0, 1.0))
        ckpt, diags = run_pipeline(small_model, small_calib, bits, group_size=32)
        rows = eval_recon(small_model, ckpt, small_calib)
        table = {(r["layer"], r["bits"]): r["error"] for r in rows}
        for diag in diags:
            for r, err in diag["recon"].items():
                assert table[(diag["layer"], r)] == pytest.approx(err, rel=1e-12)


class TestEvalKL:
    def test_unquantized_is_zero(self, toy_model, toy_checkpoint, calib_set):
        assert eval_kl(toy_model, toy_checkpoint, 16, calib_set.heldout) == 0.0

    def test_more_bits_no_worse(self, toy_model, toy_checkpoint, calib_set):
        k8 = eval_kl(toy_model, toy_checkpoint, 8, calib_set.heldout)
        k3 = eval_kl(toy_model, toy_checkpoint, 3, calib_set.heldout)
        assert k8 <= k3

    def test_interpolated_bit_width(self, toy_model, toy_checkpoint, calib_set):
        k8 = eval_kl(toy_model, toy_checkpoint, 8, calib_set.heldout)
        k6 = eval_kl(toy_model, toy_checkpoint, 6, calib_set.heldout)
        k4 = eval_kl(toy_model, toy_checkpoint, 4, calib_set.heldout)
        assert np.isfinite(k6)
        assert k8 * 0.9 <= k6 <= k4 * 1.1


class TestEvalRecon:
    def test_matches_independent_recompute(self, small_model, small_calib):
        bits = BitWidthSet((4, 8), (1.0, 1.0))
        ckpt, _ = run_pipeline(small_model, small_calib, bits, group_size=32)
        rows = eval_recon(small_model, ckpt, small_calib)

        work = dict(small_model.weights)
        for layer in ckpt.layers:
            X_in = small_model.layer_input(layer.name, small_calib.calib, work)
            W = small_model.weights[layer.name]
            c = ckpt.master_bits
            cols = layer.grid.column_scales(W.shape[1])
            for r in ckpt.bits.targets:
                k = c - r
                q = layer.codes.astype(np.int64)
                qr = np.minimum((q + (1 << (k - 1))) >> k, (1 << r) - 1) if k else q
                dq = cols * ((qr << k) - (1 << (c - 1)))
                want = float((((dq - W) @ X_in.T) ** 2).sum())
                got = next(
                    row["error"] for row in rows
                    if row["layer"] == layer.name and row["bits"] == r
                )
                assert got == pytest.approx(want, rel=1e-6)
            work[layer.name] = layer.dense()


class TestRouting:
    def test_exactly_19_configurations(self):
        configs = enumerate_block_configs((2, 3, 4), 4, 3)
        assert len(configs) == 19
        # independent count: coefficient of x^12 in (x^2+x^3+x^4)^4
        poly = np.array([1.0])
        for _ in range(4):
            poly = np.convolve(poly, [0, 0, 1, 1, 1])
        assert int(poly[12]) == 19

    def test_deterministic(self, toy_model, toy_checkpoint, calib_set):
        a = analyze_routing(toy_checkpoint, toy_model, 1, calib_set.heldout)
        b = analyze_routing(toy_checkpoint, toy_model, 1, calib_set.heldout)
        assert np.array_equal(a["best"], b["best"])
        assert np.array_equal(a["mse"], b["mse"])
        assert a["win_counts"] == b["win_counts"]

    def test_win_counts_total(self, toy_model, toy_checkpoint, calib_set):
        res = analyze_routing(toy_checkpoint, toy_model, 0, calib_set.heldout)
        assert sum(res["win_counts"].values()) == calib_set.heldout.shape[0]

    def test_duplicated_weights_symmetry(self):
        model = ToyModel.create(seed=6, dim=32, n_blocks=1, vocab=16)
        model.weights["block0.attn_out"] = model.weights["block0.attn_in"].copy()
        calib = CalibSet.generate(6, 32, n_calib=256, n_heldout=64)
        bits = BitWidthSet((3, 4, 8), (1.0, 1.0, 1.0))
        ckpt, _ = run_pipeline(model, calib, bits, group_size=32)
        res = analyze_routing(ckpt, model, 0, calib.heldout)
        labels = res["configs"]
        for ci, label in enumerate(labels):
            parts = label.split("-")
            swapped = "-".join([parts[1], parts[0]] + parts[2:])
            cj = labels.index(swapped)
            assert np.array_equal(res["mse"][ci], res["mse"][cj])

    def test_wrong_block_arity_rejected(self, toy_checkpoint, calib_set,
                                        toy_model):
        class ThreeLayerView(ToyModel):
            def block_layers(self, b):
                return super().block_layers(b)[:3]

        broken = ThreeLayerView(**vars(toy_model))
        with pytest.raises(HarnessError, match="4-layer block"):
            analyze_routing(toy_checkpoint, broken, 0, calib_set.heldout)
