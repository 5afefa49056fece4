"""Fixed-weight latent/pixel codec with causal streaming decode.

The decode direction expands every latent frame into ``temporal_stride``
pixel frames of ``spatial_stride`` x ``spatial_stride`` patches, except the
very first frame of a stream which expands to a single pixel frame.  With
stride 4 and 4-frame blocks that is the familiar 13-then-16 pattern.

Construction: per latent site, segment pixels are D @ u_k + E @ u_{k-1},
where D and E are fixed random orthonormal column blocks with D^T E = 0 and
u_{k-1} is the previous latent frame (the decoder's temporal cache, carried
across block boundaries).  The encoder is the transpose D^T, so it recovers
latents exactly regardless of the cross-frame term, and streaming decode is
bit-identical to decoding the whole sequence at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Iterator

import numpy as np

from streamkv.errors import ContractViolation

__all__ = [
    "CodecSpec", "LatentBlock", "StreamingDecoder", "decode_stream", "decode_all",
    "encode", "frame_count", "patch_embed", "unpatch", "patch_grid",
    "token_positions", "write_raw", "read_raw", "PATCH",
]

# token patching is fixed at 1x2x2 latent cells per token
PATCH = (1, 2, 2)


@dataclass(frozen=True)
class CodecSpec:
    latent_channels: int = 4
    pixel_channels: int = 3
    temporal_stride: int = 4
    spatial_stride: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("latent_channels", "pixel_channels", "temporal_stride", "spatial_stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        # transposed-orthogonal inversion needs at least as many pixel dims
        # per site as latent dims entering them
        seg = self.temporal_stride * self.spatial_stride ** 2 * self.pixel_channels
        if seg < 2 * self.latent_channels:
            raise ValueError("segment volume too small for the latent width")
        if self.spatial_stride ** 2 * self.pixel_channels < self.latent_channels:
            raise ValueError("first-frame volume too small for the latent width")


@dataclass
class LatentBlock:
    """One block of latent frames with its absolute block index."""

    index: int
    frames: np.ndarray  # (T, C, H, W)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be (T, C, H, W), got shape {self.frames.shape}")
        if self.index < 0:
            raise ValueError(f"block index must be non-negative, got {self.index}")


@lru_cache(maxsize=None)
def _transforms(spec: CodecSpec):
    """(D0, D, E): first-frame expander, segment expander, cross-frame term."""
    c = spec.latent_channels
    m_seg = spec.temporal_stride * spec.spatial_stride ** 2 * spec.pixel_channels
    m_first = spec.spatial_stride ** 2 * spec.pixel_channels
    rng = np.random.default_rng(spec.seed)

    def ortho(rows, cols):
        q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
        sign = np.sign(np.diag(r))
        sign[sign == 0] = 1.0
        return q * sign  # column signs pinned for reproducibility

    q = ortho(m_seg, 2 * c)
    d0 = ortho(m_first, c)
    d, e = q[:, :c].copy(), q[:, c:].copy()
    for a in (d0, d, e):
        a.setflags(write=False)
    return d0, d, e


def _check_latents(latents: np.ndarray, spec: CodecSpec) -> np.ndarray:
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 4:
        raise ValueError(f"latents must be (T, C, H, W), got shape {latents.shape}")
    if latents.shape[1] != spec.latent_channels:
        raise ValueError(
            f"channel axis has {latents.shape[1]} channels, codec expects {spec.latent_channels}")
    return latents


def _expand_segments(latents: np.ndarray, prev: np.ndarray, spec: CodecSpec) -> np.ndarray:
    """Each latent frame -> temporal_stride pixel frames, given its predecessor."""
    _, d, e = _transforms(spec)
    k, c, h, w = latents.shape
    prevs = np.concatenate([prev[None], latents[:-1]], axis=0)
    pairs = np.concatenate([prevs, latents], axis=1)  # (k, 2c, h, w)
    m = np.concatenate([e, d], axis=1)  # columns ordered to match pairs
    seg = np.einsum("mc,schw->smhw", m, pairs)
    st, ss, cp = spec.temporal_stride, spec.spatial_stride, spec.pixel_channels
    seg = seg.reshape(k, st, cp, ss, ss, h, w)
    seg = seg.transpose(0, 1, 2, 5, 3, 6, 4)
    return seg.reshape(k * st, cp, h * ss, w * ss)


def _expand_first(frame: np.ndarray, spec: CodecSpec) -> np.ndarray:
    d0, _, _ = _transforms(spec)
    c, h, w = frame.shape
    ss, cp = spec.spatial_stride, spec.pixel_channels
    one = np.einsum("mc,chw->mhw", d0, frame)
    one = one.reshape(cp, ss, ss, h, w).transpose(0, 3, 1, 4, 2)
    return one.reshape(1, cp, h * ss, w * ss)


def frame_count(num_latent_frames: int, spec: CodecSpec, initial: bool) -> int:
    """Pixel frames produced for a run of latent frames."""
    if num_latent_frames < 1:
        raise ValueError("need at least one latent frame")
    if initial:
        return 1 + (num_latent_frames - 1) * spec.temporal_stride
    return num_latent_frames * spec.temporal_stride


class StreamingDecoder:
    """Block-at-a-time decoder carrying the previous latent frame across calls.

    ``initial=True`` starts a fresh stream (first frame special-cased);
    ``initial=False`` decodes mid-stream with a zero temporal cache, which is
    what the compressor's low-res branch uses for standalone blocks.
    """

    def __init__(self, spec: CodecSpec, initial: bool = True):
        self.spec = spec
        self._initial_pending = initial
        self._prev: np.ndarray | None = None
        self._next_index: int | None = None
        self._geometry: tuple | None = None

    def decode_block(self, block: LatentBlock) -> np.ndarray:
        latents = _check_latents(block.frames, self.spec)
        if self._next_index is not None and block.index != self._next_index:
            raise ContractViolation(
                f"decode order: expected block {self._next_index}, got {block.index}")
        geom = latents.shape[1:]
        if self._geometry is None:
            self._geometry = geom
        elif geom != self._geometry:
            raise ValueError(f"latent geometry changed from {self._geometry} to {geom}")

        if self._initial_pending:
            pixels = _expand_first(latents[0], self.spec)
            if latents.shape[0] > 1:
                rest = _expand_segments(latents[1:], latents[0], self.spec)
                pixels = np.concatenate([pixels, rest], axis=0)
            self._initial_pending = False
        else:
            prev = self._prev if self._prev is not None else np.zeros(geom)
            pixels = _expand_segments(latents, prev, self.spec)

        self._prev = latents[-1].copy()
        self._next_index = block.index + 1
        return pixels


def decode_stream(blocks: Iterable[LatentBlock], spec: CodecSpec,
                  initial: bool = True) -> Iterator[np.ndarray]:
    """Yield pixel frames per block, in order, sharing one temporal cache."""
    decoder = StreamingDecoder(spec, initial=initial)
    for block in blocks:
        yield decoder.decode_block(block)


def decode_all(latents: np.ndarray, spec: CodecSpec, initial: bool = True) -> np.ndarray:
    """One-shot decode of a whole latent sequence (T, C, H, W)."""
    decoder = StreamingDecoder(spec, initial=initial)
    return decoder.decode_block(LatentBlock(0, latents))


def encode(pixels: np.ndarray, spec: CodecSpec, initial: bool | None = None) -> np.ndarray:
    """Project pixel frames back to latent frames (transposed expanders).

    ``initial=None`` infers the layout: a frame count matching the
    first-frame pattern 1 + k*stride is treated as stream-initial, anything
    else as mid-stream.  Mid-stream frame counts are floored to whole
    segments and the trailing remainder is dropped.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 4:
        raise ValueError(f"pixels must be (F, C, H, W), got shape {pixels.shape}")
    f, cp, hp, wp = pixels.shape
    if cp != spec.pixel_channels:
        raise ValueError(f"channel axis has {cp} channels, codec expects {spec.pixel_channels}")
    ss, st, c = spec.spatial_stride, spec.temporal_stride, spec.latent_channels
    if hp % ss:
        raise ValueError(f"height axis {hp} not divisible by spatial stride {ss}")
    if wp % ss:
        raise ValueError(f"width axis {wp} not divisible by spatial stride {ss}")
    if initial is None:
        initial = (f - 1) % st == 0
    h, w = hp // ss, wp // ss
    d0, d, _ = _transforms(spec)

    def fold(frames_4d):
        k = frames_4d.shape[0] // st
        seg = frames_4d.reshape(k, st, cp, h, ss, w, ss)
        seg = seg.transpose(0, 1, 2, 4, 6, 3, 5)
        return seg.reshape(k, st * cp * ss * ss, h, w)

    if initial:
        if (f - 1) % st:
            raise ValueError(
                f"frame count {f} does not fit the stream-initial pattern 1 + k*{st}")
        first = pixels[0].reshape(cp, h, ss, w, ss).transpose(0, 2, 4, 1, 3)
        z0 = np.einsum("mc,mhw->chw", d0, first.reshape(-1, h, w))[None]
        if f == 1:
            return z0
        rest = np.einsum("mc,smhw->schw", d, fold(pixels[1:]))
        return np.concatenate([z0, rest], axis=0)

    k = f // st
    if k < 1:
        raise ValueError(f"frame count {f} shorter than one segment of {st}")
    return np.einsum("mc,smhw->schw", d, fold(pixels[: k * st]))


# ---------------------------------------------------------------------------
# token patching


def patch_grid(t: int, h_lat: int, w_lat: int) -> tuple[int, int, int]:
    """Token grid for a latent block under the fixed 1x2x2 patching (floors)."""
    return t // PATCH[0], h_lat // PATCH[1], w_lat // PATCH[2]


def patch_embed(latents: np.ndarray, proj: np.ndarray) -> np.ndarray:
    """Flatten 1x2x2 latent patches and project them to model width.

    Token order is frame-major, then row, then column; each patch flattens
    as (channel, dy, dx).  Spatial dims must be even.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 4:
        raise ValueError(f"latents must be (T, C, H, W), got shape {latents.shape}")
    t, c, h, w = latents.shape
    if h % 2:
        raise ValueError(f"height axis {h} is odd; patching needs even spatial dims")
    if w % 2:
        raise ValueError(f"width axis {w} is odd; patching needs even spatial dims")
    d_in = c * PATCH[1] * PATCH[2]
    if proj.ndim != 2 or proj.shape[0] != d_in:
        raise ValueError(f"projection must be ({d_in}, d), got {proj.shape}")
    x = latents.reshape(t, c, h // 2, 2, w // 2, 2)
    x = x.transpose(0, 2, 4, 1, 3, 5).reshape(t * (h // 2) * (w // 2), d_in)
    return x @ proj


def unpatch(patch_vectors: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Inverse arrangement of patch_embed's flatten (before any projection)."""
    t, c, h, w = shape
    n = t * (h // 2) * (w // 2)
    d_in = c * PATCH[1] * PATCH[2]
    if patch_vectors.shape != (n, d_in):
        raise ValueError(f"expected shape ({n}, {d_in}), got {patch_vectors.shape}")
    x = patch_vectors.reshape(t, h // 2, w // 2, c, 2, 2)
    return x.transpose(0, 3, 1, 4, 2, 5).reshape(t, c, h, w)


def token_positions(start_frame: int, t: int, h: int, w: int) -> np.ndarray:
    """(n, 3) integer grid positions in patch_embed's token order."""
    tt, yy, xx = np.meshgrid(
        np.arange(start_frame, start_frame + t),
        np.arange(h), np.arange(w), indexing="ij")
    return np.stack([tt, yy, xx], axis=-1).reshape(-1, 3).astype(np.int64)


# ---------------------------------------------------------------------------
# raw dumps


def write_raw(path, array: np.ndarray) -> None:
    """Flat little-endian float32 dump with an ascii shape header line."""
    array = np.asarray(array)
    with open(path, "wb") as fh:
        fh.write((" ".join(str(d) for d in array.shape) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        shape = tuple(int(d) for d in header)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"payload of {data.size} floats does not match header {shape}")
    return data.reshape(shape)
