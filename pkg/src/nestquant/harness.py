"""Deterministic toy model, synthetic calibration, and the end-to-end pipeline.

The model is a stack of residual blocks (two square projections as an
attention stand-in, then a tanh MLP) with a softmax head; weights are
seeded random and never trained. Quantization walks the layers in forward
order, capturing each layer's inputs from the partially-quantized model
so that compensation sees the activations it will face at inference time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .checkpoint import Checkpoint
from .gptq import build_hessian, factor_inverse, quantize_layer
from .grid import BitWidthSet, fit_grid
from .slicing import slice_model


class HarnessError(RuntimeError):
    pass


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@dataclass
class ToyModel:
    dim: int
    hidden: int
    vocab: int
    n_blocks: int
    weights: dict[str, np.ndarray]
    order: list[str]

    @classmethod
    def create(cls, seed: int = 0, dim: int = 64, n_blocks: int = 4,
               vocab: int = 64) -> "ToyModel":
        rng = np.random.default_rng(seed)
        hidden = 4 * dim
        weights: dict[str, np.ndarray] = {}
        order: list[str] = []

        def add(name, d_out, d_in):
            weights[name] = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
            order.append(name)

        for b in range(n_blocks):
            add(f"block{b}.attn_in", dim, dim)
            add(f"block{b}.attn_out", dim, dim)
            add(f"block{b}.ff_up", hidden, dim)
            add(f"block{b}.ff_down", dim, hidden)
        add("head", vocab, dim)
        return cls(dim=dim, hidden=hidden, vocab=vocab, n_blocks=n_blocks,
                   weights=weights, order=order)

    def block_layers(self, b: int) -> list[str]:
        return [f"block{b}.attn_in", f"block{b}.attn_out",
                f"block{b}.ff_up", f"block{b}.ff_down"]

    def layer_sizes(self) -> dict[str, int]:
        return {name: w.size for name, w in self.weights.items()}

    def _forward(self, X, weights, until=None):
        """Run the stack; when ``until`` is set, return that layer's input.

        The two attention-proxy projections are parallel branches over the
        block input, so they see identical activations and their roles are
        exchangeable; the MLP pair is sequential around the nonlinearity.
        """

        def apply(name, inp):
            return inp @ weights[name].T

        h = np.asarray(X, dtype=np.float64)
        for b in range(self.n_blocks):
            names = self.block_layers(b)
            if until in (names[0], names[1]):
                return h
            h = h + (apply(names[0], h) + apply(names[1], h))
            if until == names[2]:
                return h
            u = np.tanh(apply(names[2], h))
            if until == names[3]:
                return u
            h = h + apply(names[3], u)
        if until == "head":
            return h
        if until is not None:
            raise HarnessError("unknown layer %r" % until)
        return apply("head", h)

    def forward(self, X, weights=None) -> np.ndarray:
        """Logits for a batch of row vectors."""
        return self._forward(X, weights or self.weights)

    def probs(self, X, weights=None) -> np.ndarray:
        return softmax(self.forward(X, weights))

    def layer_input(self, name: str, X, weights=None) -> np.ndarray:
        return self._forward(X, weights or self.weights, until=name)

    def block_forward(self, b: int, H, weights=None) -> np.ndarray:
        """One residual block applied to its input activations."""
        w = weights or self.weights
        names = self.block_layers(b)
        h = H + (H @ w[names[0]].T + H @ w[names[1]].T)
        u = np.tanh(h @ w[names[2]].T)
        return h + u @ w[names[3]].T


@dataclass
class CalibSet:
    calib: np.ndarray
    heldout: np.ndarray

    @classmethod
    def generate(cls, seed: int, dim: int, n_calib: int = 2048,
                 n_heldout: int = 512) -> "CalibSet":
        rng = np.random.default_rng(seed)
        calib = rng.standard_normal((n_calib, dim))
        heldout = rng.standard_normal((n_heldout, dim))
        return cls(calib=calib, heldout=heldout)


def run_pipeline(model: ToyModel, calib: CalibSet, bits: BitWidthSet,
                 group_size: int = 128, damp_rel: float = 0.01,
                 block_size: int = 128,
                 activations: str = "quantized") -> tuple[Checkpoint, list[dict]]:
    """Layer-by-layer quantization pass; returns checkpoint + diagnostics.

    ``activations="quantized"`` (default) captures each layer's inputs
    after earlier layers have been replaced by their dequantized
    master-bit versions; "fp" keeps full-precision activations throughout
    (evaluation aid only).
    """
    if calib.calib.shape[0] < 1:
        raise HarnessError("empty calibration set")
    if activations not in ("quantized", "fp"):
        raise HarnessError("unknown activation mode %r" % activations)
    work = dict(model.weights)
    capture_from = work if activations == "quantized" else model.weights
    ckpt = Checkpoint(bits=bits, group_size=group_size, damp_rel=damp_rel)
    diagnostics = []
    for name in model.order:
        X_in = model.layer_input(name, calib.calib, capture_from)
        W = model.weights[name]
        grid = fit_grid(W, bits, group_size)
        H = build_hessian(X_in.T, damp_rel)
        factor = factor_inverse(H, damp_rel)
        layer, diag = quantize_layer(
            W, factor, grid, bits, block_size=block_size, name=name, X=X_in.T
        )
        ckpt.layers.append(layer)
        work[name] = layer.dense()
        diagnostics.append({"layer": name, "recon": diag.get("recon"),
                            "objective": diag.get("objective")})
    return ckpt, diagnostics


def _sliced_weights(model: ToyModel, checkpoint: Checkpoint, spec) -> dict[str, np.ndarray]:
    if isinstance(spec, int) and spec == 16:
        return dict(model.weights)
    sliced = slice_model(checkpoint, spec)
    return {name: ly.dense() for name, ly in sliced.items()}


def kl_divergence(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    """Mean KL(softmax(p) || softmax(q)) over rows, clipped at zero."""
    p = softmax(p_logits)
    diff = log_softmax(p_logits) - log_softmax(q_logits)
    val = float((p * diff).sum(axis=1).mean())
    return max(val, 0.0)


def eval_kl(fp_model: ToyModel, checkpoint: Checkpoint, spec, data) -> float:
    """Mean output KL between the fp model and a sliced model.

    ``spec`` is a uniform bit-width, a {layer: bits} mapping, or a
    BitConfig; 16 means the unquantized passthrough.
    """
    weights = _sliced_weights(fp_model, checkpoint, spec)
    return kl_divergence(fp_model.forward(data), fp_model.forward(data, weights))


def eval_recon(fp_model: ToyModel, checkpoint: Checkpoint,
               calib: CalibSet) -> list[dict]:
    """Recompute per-layer, per-bit-width ||dq_r X - W X||_F^2 on calibration.

    Replays the pipeline's activation path (earlier layers replaced by
    their dequantized master versions) so captures match quantization.
    """
    work = dict(fp_model.weights)
    rows = []
    for layer in checkpoint.layers:
        X_in = fp_model.layer_input(layer.name, calib.calib, work)
        W = fp_model.weights[layer.name]
        base = W @ X_in.T
        for r in checkpoint.bits.targets:
            from .grid import dequant
            from .slicing import slice_to_code

            codes_r = slice_to_code(layer.codes, checkpoint.master_bits, r)
            dq = dequant(codes_r, layer.grid, r)
            err = float(((dq @ X_in.T - base) ** 2).sum())
            rows.append({"layer": layer.name, "bits": r, "error": err})
        work[layer.name] = layer.dense()
    return rows


def enumerate_block_configs(ladder, n_layers: int, avg_bits: int) -> list[tuple[int, ...]]:
    """All per-layer assignments with exact unweighted mean avg_bits."""
    target = avg_bits * n_layers
    return [cfg for cfg in product(sorted(ladder), repeat=n_layers)
            if sum(cfg) == target]


def analyze_routing(checkpoint: Checkpoint, fp_model: ToyModel, block: int,
                    data, ladder=(2, 3, 4), avg_bits: int = 3) -> dict:
    """Per-token best block config among all exact-average assignments.

    Feeds full-precision activations into the block, compares each
    config's block output against the fp block per token (MSE), and
    tallies which config wins each token.
    """
    names = fp_model.block_layers(block)
    if len(names) != 4:
        raise HarnessError("routing analysis expects a 4-layer block")
    configs = enumerate_block_configs(ladder, len(names), avg_bits)
    H_in = fp_model.layer_input(names[0], data)
    y_fp = fp_model.block_forward(block, H_in)

    by_layer = {ly.name: ly for ly in checkpoint.layers}
    from .slicing import slice_layer

    mse = np.empty((len(configs), H_in.shape[0]))
    for ci, cfg in enumerate(configs):
        weights = dict(fp_model.weights)
        for name, r in zip(names, cfg):
            weights[name] = slice_layer(by_layer[name], r).dense()
        y = fp_model.block_forward(block, H_in, weights)
        mse[ci] = ((y - y_fp) ** 2).mean(axis=1)

    best = mse.argmin(axis=0)
    labels = ["-".join(str(r) for r in cfg) for cfg in configs]
    win_counts = {label: int((best == ci).sum()) for ci, label in enumerate(labels)}
    plurality = max(win_counts.items(), key=lambda kv: kv[1])
    return {
        "configs": labels,
        "mse": mse,
        "best": best,
        "win_counts": win_counts,
        "plurality_config": plurality[0],
        "plurality_share": plurality[1] / H_in.shape[0],
    }
