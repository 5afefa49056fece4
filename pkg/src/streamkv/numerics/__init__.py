"""Dense kernels: 3D convolution, average pooling, attention, SiLU.

Two interchangeable backends provide the heavy kernels: numba-jitted loops
(the default when numba imports) and pure numpy.  Selection order:

1. the ``STREAMKV_BACKEND`` environment variable (``numba`` or ``numpy``),
   read once at first use;
2. otherwise ``numba`` when importable, else ``numpy``.

``use_backend`` overrides the choice for a scope; ``benchmarks/bench_kernels.py``
compares the two paths.  Everything computes in float64.  Outputs of the two
backends agree to rounding, not bit-for-bit, so anything that must be
bit-reproducible has to stay on one backend.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from streamkv.numerics import _jit, _pure

_ENV_FLAG = "STREAMKV_BACKEND"
_BACKENDS = ("numba", "numpy")
_active: str | None = None

__all__ = [
    "Conv3DSpec", "conv3d", "avg_pool3d", "attention", "silu",
    "active_backend", "set_backend", "use_backend",
]


def _resolve_default() -> str:
    choice = os.environ.get(_ENV_FLAG, "").strip().lower()
    if choice:
        if choice not in _BACKENDS:
            raise ValueError(
                f"{_ENV_FLAG}={choice!r}: expected one of {_BACKENDS}")
        if choice == "numba" and not _jit.HAS_NUMBA:
            raise ImportError(f"{_ENV_FLAG}=numba but numba is not importable")
        return choice
    return "numba" if _jit.HAS_NUMBA else "numpy"


def active_backend() -> str:
    """Name of the backend kernels currently dispatch to."""
    global _active
    if _active is None:
        _active = _resolve_default()
    return _active


def set_backend(name: str) -> None:
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}: expected one of {_BACKENDS}")
    if name == "numba" and not _jit.HAS_NUMBA:
        raise ImportError("numba backend requested but numba is not importable")
    global _active
    _active = name


@contextmanager
def use_backend(name: str):
    """Temporarily pin the kernel backend (tests, benchmarks)."""
    previous = active_backend()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def _impl(op: str):
    return (_jit if active_backend() == "numba" else _pure).KERNELS[op]


@dataclass(frozen=True, eq=False)
class Conv3DSpec:
    """Weights plus geometry for one 3D convolution.

    ``weights`` has shape (out_channels, in_channels, k_t, k_h, k_w); padding
    is symmetric zeros per axis.  Callers needing one-sided padding pad the
    input themselves and pass padding (0, 0, 0).
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    weights: np.ndarray = field(repr=False, default=None)
    bias: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        for name, triple in (("kernel", self.kernel), ("stride", self.stride)):
            if len(triple) != 3 or any(int(v) < 1 for v in triple):
                raise ValueError(f"{name} must be three positive ints, got {triple}")
        if len(self.padding) != 3 or any(int(v) < 0 for v in self.padding):
            raise ValueError(f"padding must be three non-negative ints, got {self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        expect = (self.out_channels, self.in_channels) + tuple(self.kernel)
        if self.weights is None or tuple(self.weights.shape) != expect:
            got = None if self.weights is None else self.weights.shape
            raise ValueError(f"weights shape {got} does not match {expect}")
        if self.bias is None or self.bias.shape != (self.out_channels,):
            raise ValueError("bias must have shape (out_channels,)")


_AXES = ("temporal", "height", "width")


def conv3d(x: np.ndarray, spec: Conv3DSpec) -> np.ndarray:
    """Direct 3D convolution of (B, C, T, H, W) input, float64 accumulation."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 5:
        raise ValueError(f"expected rank-5 input (B, C, T, H, W), got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(
            f"channel axis has {x.shape[1]} channels, spec expects {spec.in_channels}")
    for a in range(3):
        padded = x.shape[2 + a] + 2 * spec.padding[a]
        out_len = (padded - spec.kernel[a]) // spec.stride[a] + 1
        if out_len < 1:
            raise ValueError(
                f"{_AXES[a]} axis: input {x.shape[2 + a]} with kernel {spec.kernel[a]}, "
                f"padding {spec.padding[a]}, stride {spec.stride[a]} leaves no output")
    pt, ph, pw = spec.padding
    if pt or ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    w = np.ascontiguousarray(spec.weights, dtype=np.float64)
    b = np.ascontiguousarray(spec.bias, dtype=np.float64)
    return _impl("conv3d")(np.ascontiguousarray(x), w, b, tuple(int(s) for s in spec.stride))


def avg_pool3d(x: np.ndarray, window: tuple[int, int, int]) -> np.ndarray:
    """Non-overlapping mean pooling over (T, H, W); trailing remainders drop."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 5:
        raise ValueError(f"expected rank-5 input (B, C, T, H, W), got shape {x.shape}")
    if len(window) != 3 or any(int(v) < 1 for v in window):
        raise ValueError(f"window must be three positive ints, got {window}")
    for a in range(3):
        if x.shape[2 + a] < window[a]:
            raise ValueError(
                f"{_AXES[a]} axis: input {x.shape[2 + a]} shorter than window {window[a]}")
    return _impl("avg_pool3d")(np.ascontiguousarray(x), tuple(int(v) for v in window))


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Scaled dot-product attention, one head axis, no mask.

    Shapes (L_q, N_h, d_h) / (L_k, N_h, d_h); the key set may never be empty.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ValueError("q, k, v must be rank-3 (length, heads, head_dim)")
    if k.shape[0] == 0:
        raise ValueError("zero-length key set")
    if k.shape != v.shape:
        raise ValueError(f"k shape {k.shape} != v shape {v.shape}")
    if q.shape[1:] != k.shape[1:]:
        raise ValueError(f"head layout mismatch: q {q.shape[1:]} vs k {k.shape[1:]}")
    return _impl("attention")(np.ascontiguousarray(q), np.ascontiguousarray(k),
                              np.ascontiguousarray(v))


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x), via tanh for stability at large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return x * (0.5 * (np.tanh(0.5 * x) + 1.0))
