"""Importance vectors and correlation matrices for a block of layers.

Holds everything about the (s, V) pair: PCA initialization from captured
layer inputs, k-means aggregation of input dimensions into a reduction
matrix, block-diagonal expansion across layers, weight stacking, and the
orthogonality/scale regularizer. The importance vector is stored in log
space so positivity is structural during training.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, ShapeError, Tensor

S_FLOOR = 1e-6


class NumericalError(RuntimeError):
    """An eigendecomposition failed its reconstruction check."""


def second_moment(rows: np.ndarray, center: bool = False) -> np.ndarray:
    """(1/N) sum of outer products of the captured rows; optionally the
    mean is removed first (flag-selectable, off by default)."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise ShapeError("need at least 2 captured vectors")
    if center:
        rows = rows - rows.mean(axis=0, keepdims=True)
    return rows.T @ rows / rows.shape[0]


def pca_init(rows: np.ndarray, center: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of the input second-moment matrix.

    Returns (s, U) with eigenvalues descending, s the square roots of the
    eigenvalues floored at 1e-6, and U orthonormal with a deterministic
    sign convention (largest-magnitude entry of each eigenvector positive).
    """
    m = second_moment(rows, center=center)
    lam, u = np.linalg.eigh(m)
    lam = lam[::-1].copy()
    u = u[:, ::-1].copy()
    recon = (u * lam[None, :]) @ u.T
    if not np.allclose(recon, m, atol=1e-8, rtol=0.0):
        raise NumericalError("eigendecomposition reconstruction exceeds 1e-8")
    for j in range(u.shape[1]):
        k = int(np.argmax(np.abs(u[:, j])))
        if u[k, j] < 0.0:
            u[:, j] = -u[:, j]
    s = np.sqrt(np.clip(lam, 0.0, None))
    s = np.maximum(s, S_FLOOR)
    return s, u


@dataclass
class ReductionMatrix:
    """Group-averaging operator over input dimensions.

    ``matrix`` is k x d with row i equal to 1/|group i| on the members of
    group i and 0 elsewhere; ``groups`` maps each input dimension to its
    group index (0-based).
    """

    matrix: np.ndarray
    groups: np.ndarray

    @property
    def k(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    @staticmethod
    def identity(d: int) -> "ReductionMatrix":
        return ReductionMatrix(np.eye(d), np.arange(d))

    @staticmethod
    def from_groups(groups: np.ndarray, k: int) -> "ReductionMatrix":
        groups = np.asarray(groups, dtype=np.int64)
        d = groups.size
        counts = np.bincount(groups, minlength=k)
        if np.any(counts == 0):
            raise ValueError("every group must be nonempty")
        p = np.zeros((k, d))
        p[groups, np.arange(d)] = 1.0 / counts[groups]
        return ReductionMatrix(p, groups)


def _kmeans_pp_centers(points: np.ndarray, k: int,
                       rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(0, n))
    centers[0] = points[first]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a center; pick uniformly
            choice = int(rng.integers(0, n))
        else:
            choice = int(rng.choice(n, p=d2 / total))
        centers[i] = points[choice]
        d2 = np.minimum(d2, np.sum((points - centers[i]) ** 2, axis=1))
    return centers


def kmeans_group(rows: np.ndarray, k: int, rng: np.random.Generator,
                 max_iter: int = 100) -> ReductionMatrix:
    """Cluster input dimensions by the similarity of their value profiles.

    Each input dimension j becomes the point p_j in R^N (its values across
    the captured rows); the d points are clustered into k groups with
    k-means++ seeding and at most ``max_iter`` Lloyd iterations. If d <= k
    the identity grouping is returned. Empty clusters are repaired by
    reassigning the point farthest from its current centroid.
    """
    rows = np.asarray(rows, dtype=np.float64)
    d = rows.shape[1]
    if d <= k:
        return ReductionMatrix.identity(d)
    points = rows.T.copy()
    centers = _kmeans_pp_centers(points, k, rng)
    assign = np.zeros(d, dtype=np.int64)
    for _ in range(max_iter):
        dist = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(dist, axis=1)
        for c in range(k):
            members = new_assign == c
            if not members.any():
                own = dist[np.arange(d), new_assign]
                far = int(np.argmax(own))
                new_assign[far] = c
                members = new_assign == c
            centers[c] = points[members].mean(axis=0)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return ReductionMatrix.from_groups(assign, k)


@dataclass
class BlockState:
    """Expanded (s, V) state shared by the layers of one block.

    ``log_s`` and ``v`` are the trainable tensors; the per-layer reduction
    matrices and dimension offsets describe how the stacked transformed
    space maps back onto layer input dimensions. ``sigma0`` is the sum of
    log importances at (re-)initialization, the anchor of the scale
    regularizer.
    """

    layer_indices: list[int] = field(default_factory=list)
    log_s: Tensor | None = None
    v: Tensor | None = None
    reductions: list[ReductionMatrix] = field(default_factory=list)
    input_dims: list[int] = field(default_factory=list)
    offsets: list[int] = field(default_factory=list)
    sigma0: float = 0.0

    @property
    def dim(self) -> int:
        return 0 if self.log_s is None else self.log_s.data.size

    def s_values(self) -> np.ndarray:
        return np.exp(self.log_s.data) if self.log_s is not None else np.zeros(0)


def expand(state: BlockState, s_new: np.ndarray, u_new: np.ndarray,
           reduction: ReductionMatrix, layer_index: int) -> BlockState:
    """Grow the block state by one layer.

    The importance vector is extended with the new block's values and V
    becomes block-diagonal with the new orthonormal basis; the off-diagonal
    couplings start at zero and are trainable. Existing entries are copied
    bit-exactly. ``sigma0`` is recomputed over the expanded vector.
    """
    s_new = np.asarray(s_new, dtype=np.float64)
    u_new = np.asarray(u_new, dtype=np.float64)
    if np.any(s_new <= 0.0):
        raise DomainError("importance values must be positive")
    if u_new.shape != (s_new.size, s_new.size):
        raise ShapeError(f"basis {u_new.shape} does not match s {s_new.shape}")
    d_old = state.dim
    d_add = s_new.size
    log_s = np.empty(d_old + d_add)
    v = np.zeros((d_old + d_add, d_old + d_add))
    if d_old:
        log_s[:d_old] = state.log_s.data
        v[:d_old, :d_old] = state.v.data
    log_s[d_old:] = np.log(s_new)
    v[d_old:, d_old:] = u_new
    new = BlockState(
        layer_indices=state.layer_indices + [layer_index],
        log_s=Tensor(log_s, requires_grad=True),
        v=Tensor(v, requires_grad=True),
        reductions=state.reductions + [reduction],
        input_dims=state.input_dims + [reduction.d],
        offsets=state.offsets + [d_old + d_add],
        sigma0=float(log_s.sum()),
    )
    return new


def stack_weights(w_prev: Tensor | None, w_new: Tensor) -> Tensor:
    """Block-diagonal vertical stacking of weights.

    The previous stack is zero-padded on the right by the new layer's
    output columns and the new weight is zero-padded on the left, then the
    two are concatenated vertically. Stacking onto an empty stack returns
    the new weight unchanged.
    """
    if w_prev is None:
        return w_new
    c_prev = w_prev.shape[1]
    d_new = w_new.shape[1]
    top = ad.pad2d(w_prev, cols=(0, d_new))
    bottom = ad.pad2d(w_new, cols=(c_prev, 0))
    return ad.concat_rows(top, bottom)


def regularizer(s: Tensor, v: Tensor, sigma0: float) -> Tensor:
    """Orthogonality and scale anchor: ||V V^T - I||_F^2 + (sigma0 - sum log s)^2."""
    if np.any(s.data <= 0.0):
        raise DomainError("importance entries must be positive")
    if v.data.ndim != 2 or v.shape[0] != v.shape[1]:
        raise ShapeError(f"V must be square, got {v.shape}")
    if s.shape != (v.shape[0],):
        raise ShapeError(f"s length {s.shape} does not match V side {v.shape}")
    eye = Tensor(np.eye(v.shape[0]))
    ortho = ad.frobenius_sq(ad.sub(ad.matmul(v, ad.transpose(v)), eye))
    drift = ad.square(ad.sub(Tensor(np.asarray(sigma0)), ad.sum_all(ad.log(s))))
    return ad.add(ortho, drift)


def block_reduction_matrix(state: BlockState) -> np.ndarray:
    """Block-diagonal stack of the per-layer reduction matrices, mapping
    stacked original input dims to stacked transformed dims."""
    total_k = sum(r.k for r in state.reductions)
    total_d = sum(r.d for r in state.reductions)
    p = np.zeros((total_k, total_d))
    i = j = 0
    for r in state.reductions:
        p[i:i + r.k, j:j + r.d] = r.matrix
        i += r.k
        j += r.d
    return p


def apply_reduction(state: BlockState) -> tuple[Tensor, np.ndarray]:
    """The effective (s_hat, P) pair for the distance term.

    Returns the importance vector as a live tensor (exp of the trainable
    log values) and the constant block reduction matrix; the distance uses
    diag(s_hat) V^T P in place of diag(s) V^T. With identity reductions the
    pair reproduces the unreduced path exactly.
    """
    if state.log_s is None:
        raise ValueError("empty block state")
    return ad.exp(state.log_s), block_reduction_matrix(state)
