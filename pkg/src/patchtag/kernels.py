"""Dense numeric primitives shared by the encoders and the tagging pipeline.

Conventions: a "matrix" is a 2-D float32 ndarray (row-major), a "grid" is
an (H, W, C) float32 ndarray. Kernels accept float32 inputs, accumulate
reductions in float64, and return float32. No model semantics live here.
"""

import numpy as np
from scipy.special import erf

from .errors import ShapeError


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def softmax_rows(m: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``scale * m``, stabilised by max subtraction."""
    z = np.asarray(m, dtype=np.float64) * scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def layer_norm(m: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               eps: float = 1e-5) -> np.ndarray:
    """Per-row normalisation to zero mean / unit variance, then affine."""
    if gamma.shape[-1] != m.shape[-1] or beta.shape[-1] != m.shape[-1]:
        raise ShapeError(
            f"layer_norm affine length {gamma.shape[-1]}/{beta.shape[-1]} "
            f"does not match row width {m.shape[-1]}")
    x = np.asarray(m, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mean).mean(axis=-1, keepdims=True)
    y = (x - mean) / np.sqrt(var + eps)
    return (y * gamma.astype(np.float64) + beta.astype(np.float64)).astype(np.float32)


def gelu(m: np.ndarray) -> np.ndarray:
    """Elementwise GELU in the exact erf formulation."""
    x = np.asarray(m, dtype=np.float64)
    return (0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))).astype(np.float32)


def quick_gelu(m: np.ndarray) -> np.ndarray:
    """Sigmoid-based GELU variant used by some released encoders."""
    x = np.asarray(m, dtype=np.float64)
    return (x / (1.0 + np.exp(-1.702 * x))).astype(np.float32)


def bilinear_resize(g: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample an (H, W, C) grid with align-corners-false bilinear weights.

    Exact identity when the output size equals the input size.
    """
    if g.ndim != 3:
        raise ShapeError(f"bilinear_resize expects an (H, W, C) grid, got {g.shape}")
    h, w, _ = g.shape
    if min(h, w) < 1 or out_h < 1 or out_w < 1:
        raise ShapeError(f"invalid resize {h}x{w} -> {out_h}x{out_w}")
    if out_h == h and out_w == w:
        return g.astype(np.float32, copy=True)

    src = g.astype(np.float64)
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]

    top = src[y0][:, x0] * (1.0 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1.0 - fx) + src[y1][:, x1] * fx
    return (top * (1.0 - fy) + bot * fy).astype(np.float32)


def minmax_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to [0, 1]; an all-equal vector maps to all zeros."""
    v = np.asarray(v)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"minmax_normalize expects a nonempty vector, got shape {v.shape}")
    x = v.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros(v.shape, dtype=np.float32)
    return ((x - lo) / (hi - lo)).astype(np.float32)
