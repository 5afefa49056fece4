"""Shared builders for the toy geometry used across the test modules."""

import numpy as np

from streamkv import numerics
from streamkv.cache import BlockKV, CacheConfig
from streamkv.codec import token_positions
from streamkv.compressor import CompressedEntry
from streamkv.rope import RopeConfig, apply_rope

TOY_TOKENS = 192          # 4 frames * (12//2) * (16//2)
TOY_COMPRESSED = 4        # (4//2) * (12//8) * (16//8)


def toy_rope(head_dim: int = 16) -> RopeConfig:
    return RopeConfig(head_dim, (6, 6, 4))


def toy_cache_config(**overrides) -> CacheConfig:
    kwargs = dict(tokens_per_block=TOY_TOKENS, tokens_per_compressed=TOY_COMPRESSED,
                  layers=2, n_heads=4, rope=toy_rope(), frames_per_block=4,
                  sink_frames=8, recent_frames=4, top_k=16, mid_capacity=64,
                  eviction_delta=1)
    kwargs.update(overrides)
    return CacheConfig(**kwargs)


def encoded_block(cfg: CacheConfig, index: int, rng) -> tuple[BlockKV, list]:
    """BlockKV with keys rotary-encoded at the block's true positions.

    Also returns the raw (unrotated) per-layer keys so tests can re-encode
    at shifted positions and compare against cache-side corrections.
    """
    n = cfg.tokens_per_block
    if n != TOY_TOKENS:
        raise ValueError("encoded_block only supports the toy token count")
    positions = token_positions(index * cfg.frames_per_block,
                                cfg.frames_per_block, 6, 8)
    raw_keys = []
    keys, values = [], []
    for _ in range(cfg.layers):
        raw = rng.standard_normal((n, cfg.n_heads, cfg.head_dim))
        raw_keys.append(raw)
        keys.append(apply_rope(raw, positions, cfg.rope))
        values.append(rng.standard_normal((n, cfg.n_heads, cfg.head_dim)))
    q0 = rng.standard_normal((n, cfg.n_heads, cfg.head_dim))
    return BlockKV(index, keys, values, q0=q0), raw_keys


def fake_entry(cfg: CacheConfig, index: int, rng) -> CompressedEntry:
    """Compressed entry with random payloads in the cache's expected layout."""
    n_c = cfg.tokens_per_compressed
    tokens = rng.standard_normal((n_c, cfg.n_heads * cfg.head_dim))
    positions = np.tile([[index * cfg.frames_per_block, 2, 2]], (n_c, 1)).astype(np.int64)
    entry = CompressedEntry(index, tokens, positions)
    for _ in range(cfg.layers):
        entry.keys.append(rng.standard_normal((n_c, cfg.n_heads, cfg.head_dim)))
        entry.values.append(rng.standard_normal((n_c, cfg.n_heads, cfg.head_dim)))
    return entry


def available_backends() -> list:
    names = ["numpy"]
    try:
        with numerics.use_backend("numba"):
            names.append("numba")
    except ImportError:
        pass
    return names
