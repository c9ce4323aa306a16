"""Binarization of weight matrices.

Two quantization distances live here: the per-channel least-squares
binarizer with its closed form (plus the exhaustive oracle used to test
it), and the transform-weighted distance that drives quantized training.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bitpack
from .autodiff import (DomainError, ShapeError, Tensor, add, frobenius_sq,
                       l1_norm, matmul, scale, scale_rows, sub, transpose)

EPS_ALPHA = float(np.finfo(np.float64).eps)


@dataclass
class BinaryLayer:
    """Bit-packed sign weights with a per-output-channel scale.

    ``words`` holds the sign bits of the matricized weight (rows = input
    dimension, cols = output channels), packed row-major and LSB-first with
    rows padded to 64-bit word boundaries. ``alpha`` has one positive entry
    per output channel; channels whose scale had to be floored to machine
    epsilon (all-zero weight column) are listed in ``zero_channels``.
    """

    rows: int
    cols: int
    words: np.ndarray
    alpha: np.ndarray
    zero_channels: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.words = np.asarray(self.words, dtype=np.uint64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        expect = (self.rows, bitpack.words_per_row(self.cols))
        if self.words.shape != expect:
            raise ShapeError(f"packed words shape {self.words.shape}, want {expect}")
        if self.alpha.shape != (self.cols,):
            raise ShapeError(f"alpha length {self.alpha.shape}, want ({self.cols},)")
        if np.any(self.alpha <= 0.0):
            raise DomainError("alpha entries must be positive")

    def signs(self) -> np.ndarray:
        """Decode to a {-1, +1} float matrix."""
        return bitpack.bits_to_signs(
            bitpack.unpack_matrix(self.words, self.rows, self.cols))

    def dense(self) -> np.ndarray:
        """Reconstruct alpha (per column) times the sign matrix."""
        return self.signs() * self.alpha[None, :]

    def column_words(self) -> np.ndarray:
        """Repack as one padded bit row per output channel (for inference)."""
        bits = bitpack.unpack_matrix(self.words, self.rows, self.cols)
        return bitpack.pack_matrix(bits.T)


def quantize_mse(w: np.ndarray) -> BinaryLayer:
    """Closed-form least-squares binarizer, one scale per output channel.

    For each column c: b = sign(w[:, c]) and alpha = mean(|w[:, c]|), the
    minimizer of ||w[:, c] - alpha * b||^2 over alpha in R, b in {-1, 1}^d.
    All-zero columns get a machine-epsilon scale and are flagged.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError(f"quantize_mse expects a matrix, got {w.shape}")
    if not np.isfinite(w).all():
        raise DomainError("weights must be finite")
    alpha = np.abs(w).mean(axis=0)
    zero = tuple(int(c) for c in np.nonzero(alpha == 0.0)[0])
    alpha = np.where(alpha == 0.0, EPS_ALPHA, alpha)
    bits = bitpack.sign_bits(w)
    return BinaryLayer(w.shape[0], w.shape[1], bitpack.pack_matrix(bits),
                       alpha, zero)


def brute_force_quantize(w: np.ndarray, alpha_step: float = 1e-4,
                         max_dim: int = 12) -> tuple[float, np.ndarray]:
    """Exhaustive minimizer of ||w - alpha*b||^2 over sign patterns and an
    alpha grid [0, 2*max|w|] with the given step. Testing oracle only.

    The per-pattern error is an exact parabola in alpha, so the grid argmin
    is found by probing the grid points adjacent to the parabola vertex;
    this equals a full scan of the grid.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    m = w.size
    if m > max_dim:
        raise ValueError(f"brute force refuses dim {m} > {max_dim}")
    hi = 2.0 * float(np.abs(w).max(initial=0.0))
    n_grid = int(np.floor(hi / alpha_step)) + 1
    wsq = float(w @ w)

    best_err = np.inf
    best_alpha = 0.0
    best_b = np.ones(m)
    for mask in range(2 ** m):
        b = np.where((mask >> np.arange(m)) & 1, 1.0, -1.0)
        dot = float(b @ w)
        # err(alpha) = wsq - 2*alpha*dot + alpha^2*m, vertex at dot/m
        vertex = dot / m
        idx = int(np.clip(np.floor(vertex / alpha_step), 0, n_grid - 1))
        for j in (idx, idx + 1):
            if not 0 <= j < n_grid:
                continue
            alpha = j * alpha_step
            err = wsq - 2.0 * alpha * dot + alpha * alpha * m
            if err < best_err - 1e-15 or (abs(err - best_err) <= 1e-15
                                          and alpha < best_alpha):
                best_err = err
                best_alpha = alpha
                best_b = b
    return best_alpha, best_b


def transform_distance(w: Tensor, w_q: Tensor, s: Tensor, v: Tensor,
                       gamma: float) -> Tensor:
    """Importance- and correlation-weighted quantization distance.

    ``||diag(s) V^T (w - w_q)||_F^2 + gamma * ||w_q||_1`` with V applied
    along the input-dimension (row) axis of the matricized weight.
    Differentiable in every tensor argument.
    """
    if w.shape != w_q.shape:
        raise ShapeError(f"w {w.shape} and w_q {w_q.shape} differ")
    if v.data.ndim != 2 or v.shape[0] != v.shape[1]:
        raise ShapeError(f"V must be square, got {v.shape}")
    if v.shape[0] != w.shape[0]:
        raise ShapeError(f"V side {v.shape[0]} does not match rows {w.shape[0]}")
    if s.shape != (v.shape[0],):
        raise ShapeError(f"s length {s.shape} does not match V side {v.shape[0]}")
    resid = scale_rows(s, matmul(transpose(v), sub(w, w_q)))
    out = frobenius_sq(resid)
    if gamma != 0.0:
        out = add(out, scale(l1_norm(w_q), gamma))
    return out


def finalize_layer(w: np.ndarray, alpha_policy: str = "trained",
                   alpha: np.ndarray | None = None) -> BinaryLayer:
    """Pack the signs of trained weights into a BinaryLayer.

    ``alpha_policy`` selects the channel scales: "trained" takes the given
    alpha vector (negative entries are folded into the bits so the stored
    scale stays positive), "recompute" uses mean(|w column|).
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError(f"finalize_layer expects a matrix, got {w.shape}")
    signs = np.where(w >= 0.0, 1.0, -1.0)
    if alpha_policy == "recompute" or alpha is None:
        a = np.abs(w).mean(axis=0)
    elif alpha_policy == "trained":
        a = np.asarray(alpha, dtype=np.float64).copy()
        flip = a < 0.0
        signs[:, flip] = -signs[:, flip]
        a = np.abs(a)
    else:
        raise ValueError(f"unknown alpha policy {alpha_policy!r}")
    zero = tuple(int(c) for c in np.nonzero(a == 0.0)[0])
    a = np.where(a == 0.0, EPS_ALPHA, a)
    bits = bitpack.sign_bits(signs)
    return BinaryLayer(w.shape[0], w.shape[1], bitpack.pack_matrix(bits),
                       a, zero)
