"""Dense float32 tensor primitives.

Tensors are plain C-contiguous numpy arrays. Production code runs in
float32; every op preserves a float64 input dtype so test oracles can
drive the same routines at higher precision. Ops are pure functions with
no hidden state and are safe to call concurrently on distinct arrays.
"""

from __future__ import annotations

import functools
import math

import numpy as np


class DimensionError(ValueError):
    """Shapes passed to an op are inconsistent."""


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    """Coerce lists/scalars/arrays to a contiguous float array (float32 default)."""
    a = np.asarray(x)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(dtype)
    return np.ascontiguousarray(a)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return x


def matmul(a, b) -> np.ndarray:
    """Batched matrix product a[..,m,k] @ b[..,k,n]."""
    # no contiguity coercion: BLAS consumes strided views without the copy
    a = np.asarray(a)
    b = np.asarray(b)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float32)
    if b.dtype not in (np.float32, np.float64):
        b = b.astype(np.float32)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    return np.matmul(a, b)


def softmax(x, axis: int = -1) -> np.ndarray:
    """Stable softmax (max-subtracted) along `axis`.

    -inf entries are treated as masked positions and get exactly zero weight.
    """
    x = as_tensor(x)
    m = np.max(x, axis=axis, keepdims=True)
    # all-masked rows would make m = -inf; shift those rows to 0 so exp stays defined
    m = np.where(np.isfinite(m), m, 0.0).astype(x.dtype)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] != beta.shape[-1]:
        raise DimensionError("layer_norm gamma/beta must match the last axis")
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + x.dtype.type(eps))
    return xhat * gamma + beta


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(c,h,w) -> (h*w, c*k*k) patch matrix, zero padded."""
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(c, h, w, k, k), strides=(s0, s1, s2, s1, s2)
    )
    return win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * k * k)


def _col2im(dcol: np.ndarray, c: int, h: int, w: int, k: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back onto the image."""
    dxp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=dcol.dtype)
    d6 = dcol.reshape(h, w, c, k, k)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + h, j : j + w] += d6[:, :, :, i, j].transpose(2, 0, 1)
    return dxp[:, pad : pad + h, pad : pad + w]


def conv2d(x, weight, bias=None, pad: int | None = None) -> np.ndarray:
    """2-d cross-correlation, zero padded so spatial size is preserved.

    x: (c_in, h, w); weight: (c_out, c_in, k, k) with k in {1, 3}; bias: (c_out,).
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects (c,h,w) and (o,c,k,k), got {x.shape}, {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise DimensionError(f"conv2d kernel must be square 1x1 or 3x3, got {k}x{k2}")
    if x.shape[0] != c_in:
        raise DimensionError(f"conv2d channels: input has {x.shape[0]}, weight wants {c_in}")
    if pad is None:
        pad = k // 2
    if pad != k // 2:
        raise DimensionError(f"conv2d pad must be k//2={k // 2}, got {pad}")
    _, h, w = x.shape
    col = _im2col(x, k, pad)
    out = (col @ weight.reshape(c_out, -1).T).T.reshape(c_out, h, w)
    if bias is not None:
        out = out + as_tensor(bias).reshape(c_out, 1, 1)
    return np.ascontiguousarray(out)


def depthwise_conv2d(x, weight, bias=None) -> np.ndarray:
    """Per-channel 3x3 cross-correlation: x (c,h,w), weight (c,3,3), bias (c,)."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    c, h, w = x.shape
    if weight.shape != (c, 3, 3):
        raise DimensionError(f"depthwise weight must be ({c},3,3), got {weight.shape}")
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(c, h, w, 3, 3), strides=(s0, s1, s2, s1, s2)
    )
    out = np.einsum("chwij,cij->chw", win, weight)
    if bias is not None:
        out = out + as_tensor(bias).reshape(c, 1, 1)
    return np.ascontiguousarray(out.astype(x.dtype, copy=False))


def pixel_shuffle(x, r: int) -> np.ndarray:
    """Rearrange (c*r*r, h, w) -> (c, h*r, w*r); channel block (dy, dx) fills offsets."""
    x = as_tensor(x)
    cr, h, w = x.shape
    if cr % (r * r) != 0:
        raise DimensionError(f"pixel_shuffle: {cr} channels not divisible by r^2={r * r}")
    c = cr // (r * r)
    out = x.reshape(c, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c, h * r, w * r)
    return np.ascontiguousarray(out)


def pixel_unshuffle(x, r: int) -> np.ndarray:
    """Exact inverse of pixel_shuffle."""
    x = as_tensor(x)
    c, hr, wr = x.shape
    if hr % r != 0 or wr % r != 0:
        raise DimensionError(f"pixel_unshuffle: spatial dims {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    out = x.reshape(c, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(c * r * r, h, w)
    return np.ascontiguousarray(out)


def avg_pool2d(x, window: int) -> np.ndarray:
    """Mean over non-overlapping window x window cells; edge-replicates to divisibility."""
    x = as_tensor(x)
    c, h, w = x.shape
    hp = -(-h // window) * window
    wp = -(-w // window) * window
    if (hp, wp) != (h, w):
        x = np.pad(x, ((0, 0), (0, hp - h), (0, wp - w)), mode="edge")
    out = x.reshape(c, hp // window, window, wp // window, window).mean(axis=(2, 4))
    return np.ascontiguousarray(out.astype(x.dtype, copy=False))


def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic interpolation kernel (4-tap, a=-0.5)."""
    t = np.abs(t)
    t2 = t * t
    t3 = t2 * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


@functools.lru_cache(maxsize=128)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-d bicubic resampling matrix (n_out, n_in), float32.

    Antialiased when shrinking (kernel stretched by the inverse scale); edges
    replicated by clamping source indices; rows normalized to sum to one.
    """
    scale = n_out / n_in
    kscale = min(scale, 1.0)  # <1 widens the kernel for antialiasing
    support = 2.0 / kscale
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        u = (i + 0.5) / scale - 0.5
        lo = int(math.floor(u - support))
        hi = int(math.ceil(u + support))
        js = np.arange(lo, hi + 1)
        weights = cubic_kernel((u - js) * kscale)
        js = np.clip(js, 0, n_in - 1)
        for j, wgt in zip(js, weights):
            mat[i, j] += wgt
        mat[i] /= mat[i].sum()
    out = mat.astype(np.float32)
    out.setflags(write=False)
    return out


def bicubic_resize(x, scale: float) -> np.ndarray:
    """Separable bicubic resize of (c,h,w) by `scale` (output dims rounded)."""
    x = as_tensor(x)
    if scale <= 0:
        raise DimensionError(f"bicubic_resize scale must be positive, got {scale}")
    c, h, w = x.shape
    h2 = max(1, int(round(h * scale)))
    w2 = max(1, int(round(w * scale)))
    wv = resize_matrix(h, h2).astype(x.dtype)
    wh = resize_matrix(w, w2).astype(x.dtype)
    out = np.einsum("ij,cjk,lk->cil", wv, x, wh)
    return np.ascontiguousarray(out.astype(x.dtype, copy=False))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> np.ndarray:
    """Tanh-approximation GELU."""
    x = as_tensor(x)
    u = _GELU_C * (x + 0.044715 * x**3)
    return (0.5 * x * (1.0 + np.tanh(u))).astype(x.dtype, copy=False)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """Elementwise derivative of the tanh-approximation GELU."""
    x = as_tensor(x)
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du).astype(x.dtype, copy=False)
