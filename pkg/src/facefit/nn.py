"""Convolution, dense and upsampling layers expressed with autodiff primitives.

Images and feature maps are H x W x C. A convolution is an im2col ``gather``
followed by ``matmul``; zero padding is a sentinel zero row appended to the
flattened input.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import autodiff as ad


@lru_cache(maxsize=64)
def _im2col_index(h: int, w: int, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    oy = np.arange(ho) * stride - pad
    ox = np.arange(wo) * stride - pad
    dy, dx = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    ys = oy[:, None, None, None] + dy[None, None]
    xs = ox[None, :, None, None] + dx[None, None]
    ys = np.broadcast_to(ys, (ho, wo, k, k))
    xs = np.broadcast_to(xs, (ho, wo, k, k))
    valid = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    idx = np.where(valid, ys * w + xs, h * w).reshape(ho * wo, k * k)
    idx.setflags(write=False)
    return idx, ho, wo


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, weight, bias, stride: int = 1, pad: int | None = None):
    """``weight`` is (k*k*C_in, C_out) in (dy, dx, c) order."""
    x = ad.const(x)
    if x.ndim != 3:
        raise ValueError(f"conv2d expects H x W x C input, got {x.shape}")
    h, w, c = x.shape
    kk = weight.shape[0] // c
    k = int(round(np.sqrt(kk)))
    if k * k * c != weight.shape[0]:
        raise ValueError(f"weight rows {weight.shape[0]} do not match {c} input channels")
    pad = k // 2 if pad is None else pad
    idx, ho, wo = _im2col_index(h, w, k, stride, pad)
    flat = ad.reshape(x, (h * w, c))
    if pad:
        flat = ad.concat([flat, np.zeros((1, c))], axis=0)
    cols = ad.reshape(ad.gather(flat, idx), (ho * wo, k * k * c))
    out = ad.add(ad.matmul(cols, weight), bias)
    return ad.reshape(out, (ho, wo, weight.shape[1]))


@lru_cache(maxsize=16)
def _upsample_index(h: int, w: int) -> np.ndarray:
    ys = np.repeat(np.arange(h), 2)
    xs = np.repeat(np.arange(w), 2)
    idx = (ys[:, None] * w + xs[None, :]).reshape(-1)
    idx.setflags(write=False)
    return idx


def upsample2x(x):
    """Nearest-neighbour upsampling by two in both spatial directions."""
    x = ad.const(x)
    h, w, c = x.shape
    flat = ad.reshape(x, (h * w, c))
    return ad.reshape(ad.gather(flat, _upsample_index(h, w)), (2 * h, 2 * w, c))


def dense(x, weight, bias):
    return ad.add(ad.matmul(x, weight), bias)
