"""Vectorized numpy implementations of the hot kernels.

These are the fallback path when numba is unavailable and the reference the
jit path is benchmarked against.  Inputs arrive pre-validated and pre-padded
from the dispatch layer.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv3d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
           stride: tuple[int, int, int]) -> np.ndarray:
    st, sh, sw = stride
    win = sliding_window_view(x, weights.shape[2:], axis=(2, 3, 4))
    win = win[:, :, ::st, ::sh, ::sw]
    out = np.einsum("bcthwijk,ocijk->bothw", win, weights, optimize=True)
    return out + bias[None, :, None, None, None]


def avg_pool3d(x: np.ndarray, window: tuple[int, int, int]) -> np.ndarray:
    wt, wh, ww = window
    b, c, t, h, w = x.shape
    to, ho, wo = t // wt, h // wh, w // ww
    # trailing remainder is dropped
    x = x[:, :, : to * wt, : ho * wh, : wo * ww]
    x = x.reshape(b, c, to, wt, ho, wh, wo, ww)
    return x.mean(axis=(3, 5, 7))


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    scale = 1.0 / np.sqrt(q.shape[-1])
    # head-major matmuls hit BLAS; einsum would fall back to its own loops
    qh = np.ascontiguousarray(q.transpose(1, 0, 2))
    kh = np.ascontiguousarray(k.transpose(1, 0, 2))
    vh = np.ascontiguousarray(v.transpose(1, 0, 2))
    logits = (qh @ kh.transpose(0, 2, 1)) * scale
    logits -= logits.max(axis=2, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=2, keepdims=True)
    return (probs @ vh).transpose(1, 0, 2)


KERNELS = {"conv3d": conv3d, "avg_pool3d": avg_pool3d, "attention": attention}
