"""Dual-branch block compressor: 2x temporal, 8x spatial, fused to model width.

The high-res branch runs a fixed-weight conv cascade directly on the latent
block: one 2x temporal stage, three 2x spatial stages (SiLU between), and a
1x1x1 projection to model width.  The low-res branch decodes the block to
pixels, average-pools (2, 4, 4), re-encodes, and patch-embeds with the
generator's own patch projection.  Both branches land on the same
(T//2, H//8, W//8) token grid and are fused by elementwise sum.

Strided conv stages pad one leading zero on the strided axis (kernel 3, no
trailing pad), which makes every stage an exact floor-halving; symmetric
padding would round up on odd extents and break grid agreement between the
branches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from streamkv import codec as _codec
from streamkv import numerics
from streamkv.errors import GridMismatch
from streamkv.rope import RopeConfig, apply_rope

__all__ = [
    "CompressorSpec", "CompressedEntry", "Compressor", "compressed_grid", "project_kv",
]


def compressed_grid(t: int, h_lat: int, w_lat: int) -> tuple[int, int, int]:
    """Compressed token grid for a latent block (floor semantics)."""
    return t // 2, h_lat // 8, w_lat // 8


@dataclass(frozen=True)
class CompressorSpec:
    width: int            # fused token width == model width
    stage_channels: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.stage_channels < 1:
            raise ValueError("width and stage_channels must be positive")


@dataclass
class CompressedEntry:
    """Compressed stand-in for one evicted-from-recent block.

    ``tokens`` are the fused (N_c, width) vectors, ``positions`` their
    centroid (frame, row, col) grid coordinates, and ``keys``/``values`` the
    per-layer projections actually consumed by attention.
    """

    block_index: int
    tokens: np.ndarray
    positions: np.ndarray
    keys: list = field(repr=False, default_factory=list)
    values: list = field(repr=False, default_factory=list)

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be (N_c, width), got {self.tokens.shape}")
        if self.positions.shape != (self.tokens.shape[0], 3):
            raise ValueError(
                f"positions shape {self.positions.shape} does not match {self.tokens.shape[0]} tokens")

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]


def project_kv(tokens: np.ndarray, positions: np.ndarray,
               kv_weights: list[tuple[np.ndarray, np.ndarray]],
               rope_cfg: RopeConfig, n_heads: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer (K, V) for compressed tokens, keys rotated at the centroids."""
    n, width = tokens.shape
    head_dim = rope_cfg.head_dim
    if width != n_heads * head_dim:
        raise ValueError(f"width {width} != n_heads {n_heads} * head_dim {head_dim}")
    out = []
    for w_k, w_v in kv_weights:
        k = apply_rope((tokens @ w_k).reshape(n, n_heads, head_dim), positions, rope_cfg)
        v = (tokens @ w_v).reshape(n, n_heads, head_dim)
        out.append((k, v))
    return out


def _centroid_positions(block_index: int, frames_per_block: int,
                        grid: tuple[int, int, int]) -> np.ndarray:
    """Centroids of compressed cells in token-grid units, token order."""
    gt, gh, gw = grid
    start = block_index * frames_per_block
    t = start + 2 * np.arange(gt)
    y = np.rint(4 * np.arange(gh) + 1.5).astype(np.int64)
    x = np.rint(4 * np.arange(gw) + 1.5).astype(np.int64)
    tt, yy, xx = np.meshgrid(t, y, x, indexing="ij")
    return np.stack([tt, yy, xx], axis=-1).reshape(-1, 3).astype(np.int64)


class Compressor:
    """Fixed-seed compressor bound to a codec and the generator's projections."""

    # (kernel, stride) for the four downsampling stages
    _STAGES = (
        ((3, 1, 1), (2, 1, 1)),
        ((1, 3, 3), (1, 2, 2)),
        ((1, 3, 3), (1, 2, 2)),
        ((1, 3, 3), (1, 2, 2)),
    )

    def __init__(self, spec: CompressorSpec, codec_spec: _codec.CodecSpec,
                 patch_proj: np.ndarray, kv_weights: list[tuple[np.ndarray, np.ndarray]],
                 rope_cfg: RopeConfig, n_heads: int):
        if spec.width != n_heads * rope_cfg.head_dim:
            raise ValueError(
                f"width {spec.width} != n_heads {n_heads} * head_dim {rope_cfg.head_dim}")
        if patch_proj.shape[1] != spec.width:
            raise ValueError(
                f"patch projection maps to {patch_proj.shape[1]}, compressor width is {spec.width}")
        self.spec = spec
        self.codec_spec = codec_spec
        self.patch_proj = patch_proj
        self.kv_weights = kv_weights
        self.rope_cfg = rope_cfg
        self.n_heads = n_heads
        self._stages = self._build_stages()

    def _build_stages(self):
        rng = np.random.default_rng(self.spec.seed)
        chans = [self.codec_spec.latent_channels] + [self.spec.stage_channels] * 4
        stages = []
        for (kernel, stride), c_in, c_out in zip(self._STAGES, chans[:-1], chans[1:]):
            fan_in = c_in * int(np.prod(kernel))
            weights = rng.standard_normal((c_out, c_in) + kernel) / np.sqrt(fan_in)
            stages.append(numerics.Conv3DSpec(
                c_in, c_out, kernel, stride, (0, 0, 0), weights, np.zeros(c_out)))
        proj_w = rng.standard_normal(
            (self.spec.width, chans[-1], 1, 1, 1)) / np.sqrt(chans[-1])
        stages.append(numerics.Conv3DSpec(
            chans[-1], self.spec.width, (1, 1, 1), (1, 1, 1), (0, 0, 0),
            proj_w, np.zeros(self.spec.width)))
        return stages

    def hr_branch(self, frames: np.ndarray) -> np.ndarray:
        """Conv cascade on the latent block itself -> (N_c, width) tokens."""
        frames = np.asarray(frames, dtype=np.float64)
        t, _, h, w = frames.shape
        if t < 2:
            raise ValueError(f"temporal axis {t} too short, need >= 2 frames")
        if h < 8:
            raise ValueError(f"height axis {h} too short, need >= 8")
        if w < 8:
            raise ValueError(f"width axis {w} too short, need >= 8")
        x = frames.transpose(1, 0, 2, 3)[None]  # conv kernels are channel-first
        for conv in self._stages[:-1]:
            # one leading zero per strided axis realizes exact floor halving
            pad = [(0, 0), (0, 0)] + [(1, 0) if s == 2 else (0, 0) for s in conv.stride]
            x = numerics.conv3d(np.pad(x, pad), conv)
            x = numerics.silu(x)
        x = numerics.conv3d(x, self._stages[-1])
        return x[0].transpose(1, 2, 3, 0).reshape(-1, self.spec.width)

    def lr_branch(self, frames: np.ndarray, pixels: np.ndarray | None = None) -> np.ndarray:
        """Pixel-space pooling route -> (N_c, width) tokens on the same grid.

        ``pixels`` should be the block's streamed decode when available; when
        omitted the block is decoded standalone in mid-stream mode.
        """
        frames = np.asarray(frames, dtype=np.float64)
        t, _, h, w = frames.shape
        if self.codec_spec.spatial_stride % 4:
            raise ValueError("low-res chain needs a spatial stride divisible by 4")
        if h % 4 or w % 4:
            raise ValueError(
                f"low-res chain needs latent spatial dims divisible by 4, got {h}x{w}")
        if pixels is None:
            pixels = _codec.decode_all(frames, self.codec_spec, initial=False)
        pooled = numerics.avg_pool3d(
            pixels.transpose(1, 0, 2, 3)[None], (2, 4, 4))[0].transpose(1, 0, 2, 3)
        latents = _codec.encode(pooled, self.codec_spec, initial=False)
        # drop the trailing odd row/column so patching floors like the grid
        lt, _, lh, lw = latents.shape
        latents = latents[:, :, : lh - lh % 2, : lw - lw % 2]
        tokens = _codec.patch_embed(latents, self.patch_proj)
        expected = compressed_grid(t, h, w)
        got = _codec.patch_grid(lt, lh - lh % 2, lw - lw % 2)
        if got != expected:
            raise GridMismatch(f"low-res grid {got} != high-res grid {expected}")
        return tokens

    @staticmethod
    def fuse(hr_tokens: np.ndarray, lr_tokens: np.ndarray) -> np.ndarray:
        """Elementwise sum; the grids must already agree."""
        if hr_tokens.shape != lr_tokens.shape:
            raise GridMismatch(
                f"cannot fuse token sets of shape {hr_tokens.shape} and {lr_tokens.shape}")
        return hr_tokens + lr_tokens

    def compress(self, block: _codec.LatentBlock,
                 pixels: np.ndarray | None = None) -> tuple[np.ndarray, tuple[int, int, int]]:
        t, _, h, w = block.frames.shape
        grid = compressed_grid(t, h, w)
        hr = self.hr_branch(block.frames)
        lr = self.lr_branch(block.frames, pixels)
        if hr.shape[0] != int(np.prod(grid)):
            raise GridMismatch(f"high-res branch produced {hr.shape[0]} tokens, grid is {grid}")
        return self.fuse(hr, lr), grid

    def make_entry(self, block: _codec.LatentBlock,
                   pixels: np.ndarray | None = None) -> CompressedEntry:
        tokens, grid = self.compress(block, pixels)
        positions = _centroid_positions(block.index, block.frames.shape[0], grid)
        entry = CompressedEntry(block.index, tokens, positions)
        for k, v in project_kv(tokens, positions, self.kv_weights, self.rope_cfg, self.n_heads):
            entry.keys.append(k)
            entry.values.append(v)
        return entry
