"""Numba kernels for the hot loops, compiled lazily on first call.

fastmath stays off: reassociating reductions would break the bit-for-bit
reproducibility the traces are checked against.  np.dot lowers to BLAS, so
the attention kernel keeps matmul speed and only the softmax is a loop.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only on stripped installs
    HAS_NUMBA = False

KERNELS: dict = {}

if HAS_NUMBA:
    _jit_kwargs = {"cache": True, "fastmath": False}

    @njit(**_jit_kwargs)
    def _conv3d(x, weights, bias, st, sh, sw):
        nb, ci, t, h, w = x.shape
        co, _, kt, kh, kw = weights.shape
        to = (t - kt) // st + 1
        ho = (h - kh) // sh + 1
        wo = (w - kw) // sw + 1
        out = np.empty((nb, co, to, ho, wo))
        for n in range(nb):
            for o in range(co):
                for tt in range(to):
                    for yy in range(ho):
                        for xx in range(wo):
                            acc = bias[o]
                            for c in range(ci):
                                for i in range(kt):
                                    for j in range(kh):
                                        for l in range(kw):
                                            acc += (x[n, c, tt * st + i, yy * sh + j, xx * sw + l]
                                                    * weights[o, c, i, j, l])
                            out[n, o, tt, yy, xx] = acc
        return out

    @njit(**_jit_kwargs)
    def _avg_pool3d(x, wt, wh, ww):
        nb, c, t, h, w = x.shape
        to, ho, wo = t // wt, h // wh, w // ww
        out = np.empty((nb, c, to, ho, wo))
        norm = 1.0 / (wt * wh * ww)
        for n in range(nb):
            for cc in range(c):
                for tt in range(to):
                    for yy in range(ho):
                        for xx in range(wo):
                            acc = 0.0
                            for i in range(wt):
                                for j in range(wh):
                                    for l in range(ww):
                                        acc += x[n, cc, tt * wt + i, yy * wh + j, xx * ww + l]
                            out[n, cc, tt, yy, xx] = acc * norm
        return out

    @njit(**_jit_kwargs)
    def _attention(q, k, v):
        lq, nh, dh = q.shape
        lk = k.shape[0]
        scale = 1.0 / np.sqrt(dh)
        out = np.empty((lq, nh, dh))
        for h in range(nh):
            qh = np.ascontiguousarray(q[:, h, :])
            kh = np.ascontiguousarray(k[:, h, :])
            vh = np.ascontiguousarray(v[:, h, :])
            logits = np.dot(qh, kh.T) * scale
            for i in range(lq):
                m = logits[i, 0]
                for j in range(1, lk):
                    if logits[i, j] > m:
                        m = logits[i, j]
                z = 0.0
                for j in range(lk):
                    logits[i, j] = np.exp(logits[i, j] - m)
                    z += logits[i, j]
                inv = 1.0 / z
                for j in range(lk):
                    logits[i, j] *= inv
            out[:, h, :] = np.dot(logits, vh)
        return out

    def conv3d(x, weights, bias, stride):
        return _conv3d(x, weights, bias, stride[0], stride[1], stride[2])

    def avg_pool3d(x, window):
        return _avg_pool3d(x, window[0], window[1], window[2])

    def attention(q, k, v):
        return _attention(q, k, v)

    KERNELS = {"conv3d": conv3d, "avg_pool3d": avg_pool3d, "attention": attention}
