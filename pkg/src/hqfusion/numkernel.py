"""Dense float64 numeric kernels.

Affine maps, softmax under an additive mask, multi-head attention that
exposes its (head-averaged) attention weights, and bilinear sampling on
metric feature grids.  Everything here is a pure function over immutable
inputs; no kernel mutates its arguments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MaskError, ShapeError

# Additive sentinel for "this key is not attendable".  It is excluded from
# max-subtraction and exponentiation rather than added as a large negative
# float, so blocked entries come out of the softmax as exact zeros.
BLOCKED = float("-inf")

LN_EPS = 1e-6


class AttentionMask:
    """Dense mask over {0, BLOCKED}.

    Stored as a boolean matrix (True = blocked).  Every row must keep at
    least one key open so downstream softmaxes are always well defined.
    """

    def __init__(self, blocked: np.ndarray):
        blocked = np.asarray(blocked, dtype=bool)
        if blocked.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {blocked.shape}")
        if blocked.shape[1] > 0 and bool(blocked.all(axis=1).any()):
            raise MaskError("mask has a fully blocked row")
        self.blocked = blocked

    @property
    def shape(self) -> tuple[int, int]:
        return self.blocked.shape

    @classmethod
    def open(cls, n_q: int, n_k: int | None = None) -> "AttentionMask":
        """Mask with every entry attendable."""
        return cls(np.zeros((n_q, n_k if n_k is not None else n_q), dtype=bool))

    def to_additive(self) -> np.ndarray:
        """Render as a float matrix of {0, BLOCKED}."""
        return np.where(self.blocked, BLOCKED, 0.0)


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """w @ x + b with strict shape checking."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.ndim != 2 or x.ndim != 1 or b.ndim != 1:
        raise ShapeError("affine expects w (m,n), x (n,), b (m,)")
    if w.shape[1] != x.shape[0] or w.shape[0] != b.shape[0]:
        raise ShapeError(
            f"affine shapes do not conform: w {w.shape}, x {x.shape}, b {b.shape}"
        )
    return w @ x + b


def _softmax_rows(logits: np.ndarray, blocked: np.ndarray) -> np.ndarray:
    """Row softmax with blocked entries forced to exact 0.

    The row max is taken over open entries only; blocked logits are replaced
    by -inf before exponentiation, so exp() yields exact zeros there.
    """
    z = np.where(blocked, -np.inf, logits)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax(logits: np.ndarray, blocked_row: np.ndarray) -> np.ndarray:
    """Softmax of a logit vector under one mask row (True = blocked)."""
    logits = np.asarray(logits, dtype=np.float64)
    blocked_row = np.asarray(blocked_row, dtype=bool)
    if logits.shape != blocked_row.shape or logits.ndim != 1:
        raise ShapeError(
            f"logits {logits.shape} and mask row {blocked_row.shape} must be equal 1-D"
        )
    if bool(blocked_row.all()):
        raise MaskError("softmax over a fully blocked row")
    return _softmax_rows(logits[None, :], blocked_row[None, :])[0]


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Layer normalization over the last axis (eps fixed at LN_EPS)."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + LN_EPS) * gamma + beta


@dataclass
class MhaWeights:
    """Projection tensors of one multi-head attention block.

    Linear layers follow the (out, in) convention and are applied to row
    vectors as ``x @ w.T + b``.
    """

    heads: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    bo: np.ndarray

    @classmethod
    def identity(cls, d: int, heads: int = 1) -> "MhaWeights":
        """Identity projections and zero biases (handy in tests)."""
        eye = np.eye(d)
        zero = np.zeros(d)
        return cls(heads, eye, eye.copy(), eye.copy(), eye.copy(),
                   zero, zero.copy(), zero.copy(), zero.copy())


def multi_head_attention(
    q_in: np.ndarray,
    k_in: np.ndarray,
    v_in: np.ndarray,
    mask: AttentionMask,
    weights: MhaWeights,
) -> tuple[np.ndarray, np.ndarray]:
    """Masked scaled dot-product attention.

    Returns (output, attn) where attn is the mean over heads of the
    post-softmax weights; each attn row sums to 1 and blocked entries
    are exact zeros.
    """
    q_in = np.asarray(q_in, dtype=np.float64)
    k_in = np.asarray(k_in, dtype=np.float64)
    v_in = np.asarray(v_in, dtype=np.float64)
    n_q, d = q_in.shape
    n_k = k_in.shape[0]
    if k_in.shape[1] != d or v_in.shape != k_in.shape:
        raise ShapeError("q/k/v feature dims do not match")
    if mask.shape != (n_q, n_k):
        raise ShapeError(f"mask shape {mask.shape} does not match ({n_q},{n_k})")
    h = weights.heads
    if d % h != 0:
        raise ConfigError(f"head count {h} does not divide model dim {d}")
    dh = d // h

    q = q_in @ weights.wq.T + weights.bq
    k = k_in @ weights.wk.T + weights.bk
    v = v_in @ weights.wv.T + weights.bv

    qh = q.reshape(n_q, h, dh).transpose(1, 0, 2)
    kh = k.reshape(n_k, h, dh).transpose(1, 0, 2)
    vh = v.reshape(n_k, h, dh).transpose(1, 0, 2)

    # in-place softmax with the blocked sentinel applied before exp, so
    # blocked entries come out exactly zero (see _softmax_rows)
    logits = qh @ kh.transpose(0, 2, 1)
    logits /= math.sqrt(dh)
    if mask.blocked.any():
        np.copyto(logits, -np.inf, where=mask.blocked[None, :, :])
    m = logits.max(axis=2, keepdims=True)
    np.subtract(logits, m, out=logits)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=2, keepdims=True)
    attn_h = logits

    ctx = (attn_h @ vh).transpose(1, 0, 2).reshape(n_q, d)
    out = ctx @ weights.wo.T + weights.bo
    return out, attn_h.mean(axis=0)


def bilinear_at(data: np.ndarray, fy: np.ndarray, fx: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of data (H,W,d) at fractional cell coords.

    Coordinates index cell centers (integer coords hit centers exactly);
    indices are clamped at the borders while the four weights keep summing
    to one.  Accepts scalars or equally shaped arrays of coordinates.
    """
    scalar = np.ndim(fy) == 0 and np.ndim(fx) == 0
    fy = np.atleast_1d(np.asarray(fy, dtype=np.float64))
    fx = np.atleast_1d(np.asarray(fx, dtype=np.float64))
    h, w = data.shape[:2]
    y0 = np.floor(fy).astype(int)
    x0 = np.floor(fx).astype(int)
    ty = fy - y0
    tx = fx - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    w00 = (1.0 - ty) * (1.0 - tx)
    w01 = (1.0 - ty) * tx
    w10 = ty * (1.0 - tx)
    w11 = ty * tx
    # array indices force fancy-index gathers, which copy, so scaling the
    # gathered terms in place never touches the grid itself
    out = data[y0c, x0c] * w00[..., None]
    for (yy, xx, wgt) in ((y0c, x1c, w01), (y1c, x0c, w10), (y1c, x1c, w11)):
        term = data[yy, xx]
        term *= wgt[..., None]
        out += term
    return out[0] if scalar else out


def bilinear_sample(grid, p) -> np.ndarray:
    """Sample a metric BEV grid at a 2-D point (meters).

    Points outside the grid extent return the zero vector; inside, the
    result is the bilinear blend of the four surrounding cell features.
    """
    x = float(p[0])
    y = float(p[1])
    if not (grid.x_min <= x <= grid.x_max and grid.y_min <= y <= grid.y_max):
        return np.zeros(grid.d, dtype=np.float64)
    fx = (x - grid.x_min) / grid.voxel - 0.5
    fy = (y - grid.y_min) / grid.voxel - 0.5
    return bilinear_at(grid.data, fy, fx)


def bilinear_sample_many(grid, points: np.ndarray) -> np.ndarray:
    """Vectorized bilinear_sample over an (M,2) array of metric points."""
    points = np.asarray(points, dtype=np.float64)
    x = points[:, 0]
    y = points[:, 1]
    inside = (
        (x >= grid.x_min) & (x <= grid.x_max) & (y >= grid.y_min) & (y <= grid.y_max)
    )
    fx = (x - grid.x_min) / grid.voxel - 0.5
    fy = (y - grid.y_min) / grid.voxel - 0.5
    out = bilinear_at(grid.data, np.where(inside, fy, 0.0), np.where(inside, fx, 0.0))
    out[~inside] = 0.0
    return out
