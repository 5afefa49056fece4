"""Three-axis rotary position encoding for (frame, row, column) token grids.

The head dimension is partitioned into a temporal, a height and a width
block.  Within each block, consecutive coordinate pairs (x_{2i}, x_{2i+1})
are rotated by ``pos * base ** (-2i / d_axis)`` -- pairs are adjacent dims
(interleaved layout), not a split-half layout.

``temporal_shift`` re-rotates only the temporal block by a frame delta.
Because per-axis angles are additive, shifting already-encoded keys by delta
is equivalent to encoding the raw keys at the shifted frame, which is what
lets a cache rotate stored sink keys forward after evictions instead of
keeping raw copies around.  All math is float64; the composition guarantees
are only meaningful at that precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = ["RopeConfig", "default_split", "apply_rope", "temporal_shift"]

# Reference allocation of a 128-dim head across (temporal, height, width);
# other head widths scale it, see default_split.
_REFERENCE_SPLIT = (44, 42, 42)


@dataclass(frozen=True)
class RopeConfig:
    """Head width, its (d_t, d_h, d_w) split, and the frequency base."""

    head_dim: int
    split: tuple[int, int, int]
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2:
            raise ValueError(f"head_dim must be a positive even int, got {self.head_dim}")
        if len(self.split) != 3:
            raise ValueError(f"split must have three entries, got {self.split}")
        if any(d < 0 or d % 2 for d in self.split):
            raise ValueError(f"split entries must be even and non-negative, got {self.split}")
        if sum(self.split) != self.head_dim:
            raise ValueError(f"split {self.split} does not sum to head_dim {self.head_dim}")
        if self.base <= 1.0:
            raise ValueError(f"base must exceed 1, got {self.base}")


def default_split(head_dim: int) -> tuple[int, int, int]:
    """Split a head width proportionally to the 44:42:42 reference.

    Whole pairs are allocated largest-remainder style with the temporal axis
    winning ties, so the temporal block absorbs any leftover width.
    """
    if head_dim < 6 or head_dim % 2:
        raise ValueError(f"head_dim must be an even int >= 6, got {head_dim}")
    total = sum(_REFERENCE_SPLIT)
    exact = [head_dim * r / total for r in _REFERENCE_SPLIT]
    parts = [2 * int(e // 2) for e in exact]
    order = sorted(range(3), key=lambda a: (-(exact[a] - parts[a]), a))
    spare_pairs = (head_dim - sum(parts)) // 2
    for i in range(spare_pairs):
        parts[order[i % 3]] += 2
    return tuple(parts)


@lru_cache(maxsize=None)
def _axis_freqs(d_axis: int, base: float) -> np.ndarray:
    freqs = base ** (-2.0 * np.arange(d_axis // 2) / d_axis)
    freqs.setflags(write=False)
    return freqs


def _pair_angles(positions: np.ndarray, cfg: RopeConfig) -> np.ndarray:
    """Angles per (token, pair), pairs laid out axis block by axis block."""
    blocks = []
    for axis, d_axis in enumerate(cfg.split):
        if d_axis:
            blocks.append(positions[:, axis, None] * _axis_freqs(d_axis, cfg.base)[None, :])
    return np.concatenate(blocks, axis=1)


def _check_positions(positions, n: int) -> np.ndarray:
    pos = np.asarray(positions)
    if pos.shape != (n, 3):
        raise ValueError(f"positions must have shape ({n}, 3), got {pos.shape}")
    if not np.issubdtype(pos.dtype, np.integer):
        if not np.all(pos == np.floor(pos)):
            raise ValueError("positions must be integral")
        pos = pos.astype(np.int64)
    return pos.astype(np.float64)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def apply_rope(x: np.ndarray, positions, cfg: RopeConfig) -> np.ndarray:
    """Rotate vectors by their (t, y, x) grid positions.

    ``x`` is (N, ..., head_dim); any middle axes (heads) broadcast.  Returns
    a new array, float64.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] != cfg.head_dim:
        raise ValueError(f"last axis of x must be head_dim={cfg.head_dim}, got shape {x.shape}")
    pos = _check_positions(positions, x.shape[0])
    angles = _pair_angles(pos, cfg)
    shape = (x.shape[0],) + (1,) * (x.ndim - 2) + (cfg.head_dim // 2,)
    cos = np.cos(angles).reshape(shape)
    sin = np.sin(angles).reshape(shape)
    return _rotate(x, cos, sin)


def temporal_shift(x: np.ndarray, delta: int, cfg: RopeConfig) -> np.ndarray:
    """Advance already-encoded vectors by ``delta`` frames.

    Only the temporal block is touched; height and width dims come back
    byte-identical.  delta 0 is an exact no-op (fresh copy).  Composes:
    shifting by d1 then d2 equals shifting once by d1 + d2 up to float64
    rounding, and equals re-encoding the raw vector at the shifted frame.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] != cfg.head_dim:
        raise ValueError(f"last axis of x must be head_dim={cfg.head_dim}, got shape {x.shape}")
    if int(delta) != delta:
        raise ValueError(f"delta must be an integer frame count, got {delta!r}")
    out = x.copy()
    d_t = cfg.split[0]
    if delta == 0 or d_t == 0:
        return out
    angles = float(delta) * _axis_freqs(d_t, cfg.base)
    cos = np.cos(angles)
    sin = np.sin(angles)
    head = x[..., :d_t]
    out[..., 0:d_t:2] = head[..., 0::2] * cos - head[..., 1::2] * sin
    out[..., 1:d_t:2] = head[..., 0::2] * sin + head[..., 1::2] * cos
    return out
