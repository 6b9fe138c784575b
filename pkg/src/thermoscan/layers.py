"""Neural-network primitives with explicit forward/backward passes.

All layers operate on NCHW float arrays, cache exactly what their
backward pass needs, and return analytically exact gradients. Convolution
uses an im2col layout so both passes reduce to one GEMM; the column
matrix is cached and reused for the weight gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass
class ConvCache:
    cols: np.ndarray          # (N, Ho, Wo, Cin*kh*kw)
    x_shape: tuple
    stride: int
    pad: int


def conv2d_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int
) -> tuple[np.ndarray, ConvCache]:
    """Zero-padded strided convolution; returns output and backward cache."""
    n, c_in, h, win = x.shape
    c_out, _, kh, kw = w.shape
    pad = kh // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Cin, Ho, Wo, kh, kw) -> (N, Ho, Wo, Cin*kh*kw)
    ho, wo = windows.shape[2], windows.shape[3]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n, ho, wo, c_in * kh * kw
    )
    y = cols @ w.reshape(c_out, -1).T + b
    cache = ConvCache(cols=cols, x_shape=x.shape, stride=stride, pad=pad)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), cache


def conv2d_backward(
    dy: np.ndarray, w: np.ndarray, cache: ConvCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) for conv2d_forward."""
    n, c_in, h, win = cache.x_shape
    c_out, _, kh, kw = w.shape
    s, pad = cache.stride, cache.pad
    ho, wo = dy.shape[2], dy.shape[3]

    dy_mat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, c_out)
    cols_mat = cache.cols.reshape(-1, c_in * kh * kw)
    dw = (dy_mat.T @ cols_mat).reshape(w.shape)
    db = dy_mat.sum(axis=0)

    dcols = (dy_mat @ w.reshape(c_out, -1)).reshape(n, ho, wo, c_in, kh, kw)
    dcols = dcols.transpose(0, 3, 1, 2, 4, 5)  # (N, Cin, Ho, Wo, kh, kw)
    dxp = np.zeros((n, c_in, h + 2 * pad, win + 2 * pad), dtype=dy.dtype)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += dcols[:, :, :, :, ki, kj]
    dx = dxp[:, :, pad:pad + h, pad:pad + win]
    return np.ascontiguousarray(dx), dw, db


def relu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


def global_avg_pool_forward(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Mean over the spatial axes: (N, C, H, W) -> (N, C)."""
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dy: np.ndarray, x_shape: tuple) -> np.ndarray:
    n, c, h, w = x_shape
    return np.broadcast_to(dy[:, :, None, None], x_shape) / (h * w)


def dense_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """y = x @ w + b with x of shape (N, in), w of shape (in, out)."""
    return x @ w + b, x


def dense_backward(
    dy: np.ndarray, w: np.ndarray, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dx = dy @ w.T
    dw = x.T @ dy
    db = dy.sum(axis=0)
    return dx, dw, db


def l2_normalize_rows(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise projection onto the unit sphere; returns (z, norms)."""
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / norms, norms


def l2_normalize_rows_backward(
    dz: np.ndarray, z: np.ndarray, norms: np.ndarray
) -> np.ndarray:
    """Backward of row-wise L2 normalization: dv = (dz - z (z.dz)) / |v|."""
    inner = np.sum(dz * z, axis=-1, keepdims=True)
    return (dz - z * inner) / norms
