"""Multi-bit-width layer quantizer with Hessian error compensation.

The quantizer produces one set of master-bit codes that is simultaneously
good for every target bit-width: each weight's code is chosen by
exhaustively scoring all 2^c candidates under the weighted sum of sliced
reconstruction errors, and the column-by-column error feedback propagates
the average residual across targets through the inverse-Hessian rows.
With a single target bit-width the whole thing degenerates to standard
GPTQ, which is used as a correctness anchor.

Candidate scoring is vectorized over (weights x candidates); columns are
processed left to right in blocks, updating the remainder of the matrix
once per block. The column loop is inherently sequential (each column
sees the compensation from all previous ones).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .grid import BitWidthSet, QuantGrid, _slice_master_values
from .slicing import NestedLayer


class QuantizeError(RuntimeError):
    pass


@dataclass
class CalibBatch:
    """Layer inputs, feature-major: X is (d_col, n_samples)."""

    X: np.ndarray

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[1] < 1:
            raise QuantizeError("calibration batch must be (d_col, n>=1)")
        if not np.isfinite(self.X).all():
            raise QuantizeError("non-finite calibration data")

    @property
    def n_samples(self) -> int:
        return self.X.shape[1]


@dataclass
class HessianFactor:
    """Upper Cholesky factor of the inverse Hessian (chol_upper.T @ chol_upper == H^-1)."""

    chol_upper: np.ndarray
    damp_rel: float = 0.01
    damp_abs: float = 0.0

    def __post_init__(self):
        if (np.diag(self.chol_upper) <= 0).any():
            raise QuantizeError("factorization failed: non-positive diagonal")

    @property
    def dim(self) -> int:
        return self.chol_upper.shape[0]


def build_hessian(X, damp_rel: float = 0.01) -> np.ndarray:
    """H = 2 X X^T + damp_rel * mean(diag(2 X X^T)) * I."""
    if damp_rel <= 0:
        raise QuantizeError("dampening must be positive")
    if isinstance(X, CalibBatch):
        X = X.X
    X = np.asarray(X, dtype=np.float64)
    G = 2.0 * (X @ X.T)
    mean_diag = np.diag(G).mean()
    if mean_diag == 0.0:
        raise QuantizeError("degenerate calibration")
    H = G + (damp_rel * mean_diag) * np.eye(G.shape[0])
    return H


def factor_inverse(H: np.ndarray, damp_rel: float = 0.01) -> HessianFactor:
    """Factor H^-1 through its Cholesky decomposition."""
    H = np.asarray(H, dtype=np.float64)
    try:
        L = np.linalg.cholesky(H)
        Hinv = scipy.linalg.cho_solve((L, True), np.eye(H.shape[0]))
        chol_upper = np.linalg.cholesky(Hinv).T
    except np.linalg.LinAlgError as exc:
        raise QuantizeError("factorization failed") from exc
    # The damp used to build H is recoverable from its own diagonal:
    # mean(diag H) = mean(diag 2XX^T) * (1 + damp_rel).
    damp_abs = damp_rel * np.diag(H).mean() / (1.0 + damp_rel)
    return HessianFactor(chol_upper=chol_upper, damp_rel=damp_rel, damp_abs=damp_abs)


def _candidate_tables(bits: BitWidthSet):
    """Per-target master-grid offsets of every sliced candidate code."""
    c = bits.master
    return [
        (lam, _slice_master_values(c, r).astype(np.float64))
        for r, lam in zip(bits.targets, bits.weights)
    ]


def _select_block(W, col_scales, tables, qmax):
    """Minimal-weighted-error codes for a block of columns.

    W and col_scales are (d_row, w); returns int64 codes. Ties resolve to
    the smallest candidate (argmin takes the first minimum).
    """
    err = np.zeros(W.shape + (qmax + 1,))
    for lam, mv in tables:
        dq = col_scales[:, :, None] * mv[None, None, :]
        err += lam * (W[:, :, None] - dq) ** 2
    return err.argmin(axis=2)


def select_codes(W: np.ndarray, grid: QuantGrid, bits: BitWidthSet) -> np.ndarray:
    """Pick, per weight, the master code minimizing the weighted multi-bit error.

    Scores every candidate code in [0, 2^c - 1] against all target
    bit-widths at once. Processed in column strips to bound the
    (rows x strip x candidates) working set.
    """
    W = np.asarray(W, dtype=np.float64)
    if not np.isfinite(W).all():
        raise QuantizeError("non-finite weight")
    c = bits.master
    qmax = (1 << c) - 1
    tables = _candidate_tables(bits)
    col_scales = grid.column_scales(W.shape[1])
    strip = max(1, (1 << 22) // max(1, W.shape[0] * (qmax + 1)))
    out = np.empty(W.shape, dtype=np.int64)
    for lo in range(0, W.shape[1], strip):
        hi = min(lo + strip, W.shape[1])
        out[:, lo:hi] = _select_block(
            W[:, lo:hi], col_scales[:, lo:hi], tables, qmax
        )
    return out


def quantize_layer(
    W: np.ndarray,
    factor: HessianFactor,
    grid: QuantGrid,
    bits: BitWidthSet,
    block_size: int = 128,
    name: str = "layer",
    X: np.ndarray | None = None,
) -> tuple[NestedLayer, dict]:
    """Blocked column-serial quantization with averaged cross-bit feedback.

    Per column: select the multi-bit-optimal codes on the compensated
    weights, average the dequantized residuals over all target bit-widths
    (unweighted), normalize by the Cholesky diagonal, and subtract the
    outer product with the factor row from everything to the right.

    Returns the nested layer plus diagnostics: the compensated weight
    snapshot each column was quantized from, and, when calibration inputs
    X (d_col, n) are given, per-bit-width reconstruction errors
    ||dq_r X - W X||_F^2 and their weighted sum.
    """
    W0 = np.asarray(W, dtype=np.float64)
    d_row, d_col = W0.shape
    if factor.dim != d_col:
        raise QuantizeError("factor dimension does not match layer")
    if block_size < 1:
        raise QuantizeError("block size must be >= 1")
    c = bits.master
    chol = factor.chol_upper
    tables = _candidate_tables(bits)
    col_scales = grid.column_scales(d_col)
    n_targets = float(len(bits.targets))

    Wc = W0.copy()
    codes = np.empty((d_row, d_col), dtype=np.uint8)
    compensated = np.empty_like(Wc)

    # overflow is detected explicitly per block; keep numpy quiet about it
    with np.errstate(over="ignore", invalid="ignore"):
        _quantize_columns(
            Wc, codes, compensated, chol, tables, col_scales, n_targets,
            d_col, block_size, c,
        )

    layer = NestedLayer(name=name, codes=codes, grid=grid, bits=bits)
    diag: dict = {"compensated": compensated}
    if X is not None:
        X = np.asarray(X, dtype=np.float64)
        ref = W0 @ X
        recon = {}
        for r, (_, mv) in zip(bits.targets, tables):
            dq = col_scales * mv[codes.astype(np.int64)]
            recon[r] = float(((dq @ X - ref) ** 2).sum())
        diag["recon"] = recon
        diag["objective"] = float(
            sum(lam * recon[r] for r, lam in zip(bits.targets, bits.weights))
        )
    return layer, diag


def _quantize_columns(Wc, codes, compensated, chol, tables, col_scales,
                      n_targets, d_col, block_size, c):
    d_row = Wc.shape[0]
    for lo in range(0, d_col, block_size):
        hi = min(lo + block_size, d_col)
        Err = np.zeros((d_row, hi - lo))
        for j in range(lo, hi):
            w = Wc[:, j]
            s = col_scales[:, j]
            compensated[:, j] = w
            q = _select_block(w[:, None], s[:, None], tables, (1 << c) - 1)[:, 0]
            codes[:, j] = q
            resid = np.zeros(d_row)
            for _, mv in tables:
                resid += w - s * mv[q]
            resid /= n_targets
            e = resid / chol[j, j]
            Err[:, j - lo] = e
            if j + 1 < hi:
                Wc[:, j + 1 : hi] -= e[:, None] * chol[j, j + 1 : hi][None, :]
        if hi < d_col:
            Wc[:, hi:] -= Err @ chol[lo:hi, hi:]
        if not np.isfinite(Wc[:, hi:]).all() or not np.isfinite(Err).all():
            raise QuantizeError("numerical blowup")
