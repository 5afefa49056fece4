"""Partitioned cache: warm-up, handoff, eviction, context assembly, accounting."""

import numpy as np
import pytest

from streamkv.cache import (BlockKV, CacheConfig, PartitionedCache,
                            live_context_bytes, memory_report)
from streamkv.errors import ContractViolation
from streamkv.rope import RopeConfig, apply_rope

from conftest import encoded_block, fake_entry, toy_cache_config, toy_rope


def fill_cache(cfg, num_blocks, rng, cache=None):
    cache = cache or PartitionedCache(cfg)
    for i in range(cache._next_index, num_blocks):
        block, _ = encoded_block(cfg, i, rng)
        backup = fake_entry(cfg, i, rng) if i >= cfg.sink_blocks else None
        cache.append_block(block, backup)
    return cache


def test_warmup_fills_sink_then_recent():
    cfg = toy_cache_config()
    rng = np.random.default_rng(0)
    cache = PartitionedCache(cfg)
    sizes = []
    for i in range(4):
        block, _ = encoded_block(cfg, i, rng)
        backup = fake_entry(cfg, i, rng) if i >= cfg.sink_blocks else None
        cache.append_block(block, backup)
        sizes.append(cache.partition_sizes())
    assert sizes == [(1, 0, 0), (2, 0, 0), (2, 0, 1), (2, 1, 1)]
    assert cache.mid_indices() == (2,)


def test_backup_optional_in_sink_phase_and_required_after():
    cfg = toy_cache_config()
    rng = np.random.default_rng(1)
    cache = PartitionedCache(cfg)
    block0, _ = encoded_block(cfg, 0, rng)
    cache.append_block(block0, backup=fake_entry(cfg, 0, rng))  # allowed, ignored
    block1, _ = encoded_block(cfg, 1, rng)
    cache.append_block(block1)
    block2, _ = encoded_block(cfg, 2, rng)
    with pytest.raises(ContractViolation, match="needs a backup"):
        cache.append_block(block2)


def test_append_enforces_block_order():
    cfg = toy_cache_config()
    rng = np.random.default_rng(2)
    cache = fill_cache(cfg, 3, rng)
    late, _ = encoded_block(cfg, 7, rng)
    with pytest.raises(ContractViolation, match="expected block 3, got 7"):
        cache.append_block(late, fake_entry(cfg, 7, rng))


def test_long_replay_respects_all_bounds():
    # one hundred appends against a small ring: mid pegged at capacity,
    # eviction counters consistent, sink adjacency invariant holds
    cfg = toy_cache_config(mid_capacity=64)
    rng = np.random.default_rng(3)
    cache = fill_cache(cfg, 100, rng)
    sink, mid, recent = cache.partition_sizes()
    assert (sink, mid, recent) == (2, 64, 1)
    # blocks 2..98 aged into mid: 97 entries, 33 evicted to hold 64
    assert cache.mid_indices() == tuple(range(35, 99))
    assert cache.evicted_frames == 33 * 4 == 132
    assert cache.eviction_events == 33
    assert cache.earliest_mid_start_frame() == 35 * 4
    first, last = cache.sink_frame_range()
    assert first == cache.evicted_frames
    # rotated sink sits flush against the earliest surviving mid block
    assert first + cfg.sink_frames == 140 == cache.earliest_mid_start_frame()


def test_sink_keys_track_reencoding_after_evictions():
    cfg = toy_cache_config(mid_capacity=8, top_k=4)
    rng = np.random.default_rng(4)
    cache = PartitionedCache(cfg)
    raws = {}
    for i in range(20):
        block, raw = encoded_block(cfg, i, rng)
        raws[i] = raw
        backup = fake_entry(cfg, i, rng) if i >= cfg.sink_blocks else None
        cache.append_block(block, backup)
    assert cache.evicted_frames > 0
    from streamkv.codec import token_positions
    delta = cache.evicted_frames
    for b, sink_block in enumerate(cache.sink):
        positions = token_positions(b * cfg.frames_per_block, cfg.frames_per_block, 6, 8)
        shifted = positions.copy()
        shifted[:, 0] += delta
        for layer in range(cfg.layers):
            want = apply_rope(raws[b][layer], shifted, cfg.rope)
            np.testing.assert_allclose(sink_block.keys[layer], want,
                                       rtol=0, atol=1e-9)


def test_two_single_evictions_equal_one_double():
    cfg = toy_cache_config()
    rng = np.random.default_rng(5)
    a = fill_cache(cfg, 12, rng)
    b = fill_cache(cfg, 12, np.random.default_rng(5))
    a.evict_mid(2)
    b.evict_mid(1)
    b.evict_mid(1)
    assert a.mid_indices() == b.mid_indices()
    assert a.evicted_frames == b.evicted_frames
    for blk_a, blk_b in zip(a.sink, b.sink):
        for ka, kb in zip(blk_a.keys, blk_b.keys):
            np.testing.assert_allclose(ka, kb, rtol=0, atol=1e-9)


def test_zero_eviction_is_a_byte_noop():
    cfg = toy_cache_config()
    rng = np.random.default_rng(6)
    cache = fill_cache(cfg, 8, rng)
    before = [k.tobytes() for blk in cache.sink for k in blk.keys]
    assert cache.evict_mid(0) == 0
    after = [k.tobytes() for blk in cache.sink for k in blk.keys]
    assert before == after
    assert cache.eviction_events == 0


def test_eviction_never_touches_sink_values():
    cfg = toy_cache_config(mid_capacity=8, top_k=4)
    rng = np.random.default_rng(7)
    cache = PartitionedCache(cfg)
    frozen = None
    for i in range(20):
        block, _ = encoded_block(cfg, i, rng)
        backup = fake_entry(cfg, i, rng) if i >= cfg.sink_blocks else None
        cache.append_block(block, backup)
        if i == cfg.sink_blocks - 1:
            frozen = [v.tobytes() for blk in cache.sink for v in blk.values]
    assert cache.eviction_events > 0
    now = [v.tobytes() for blk in cache.sink for v in blk.values]
    assert now == frozen


def test_eviction_accumulates_correction_flops():
    cfg = toy_cache_config()
    rng = np.random.default_rng(8)
    cache = fill_cache(cfg, 12, rng)
    assert cache.correction_flops == 0
    cache.evict_mid(1)
    per_event = 6 * (cfg.sink_blocks * cfg.tokens_per_block * cfg.n_heads
                     * (cfg.rope.split[0] // 2) * cfg.layers)
    assert cache.correction_flops == per_event
    cache.evict_mid(3)
    assert cache.correction_flops == 2 * per_event


def test_assemble_context_layout_and_length():
    cfg = toy_cache_config()
    rng = np.random.default_rng(9)
    cache = fill_cache(cfg, 10, rng)
    selected = list(cache.mid_indices())[:4]
    n, heads, dim = cfg.tokens_per_block, cfg.n_heads, cfg.head_dim
    k_cur = rng.standard_normal((n, heads, dim))
    v_cur = rng.standard_normal((n, heads, dim))
    keys, values = cache.assemble_context(selected, 0, (k_cur, v_cur))
    want = cfg.context_token_count(len(selected))
    assert keys.shape == (want, heads, dim)
    assert values.shape == keys.shape
    # ordering: sink, selected mid, recent, current
    offset = cfg.sink_blocks * n
    np.testing.assert_array_equal(keys[:n], cache.sink[0].keys[0])
    np.testing.assert_array_equal(
        keys[offset:offset + cfg.tokens_per_compressed], cache.mid[0].keys[0])
    np.testing.assert_array_equal(keys[-n:], k_cur)
    np.testing.assert_array_equal(
        keys[-2 * n:-n], cache.recent[-1].block.keys[0])


def test_assemble_context_skips_unselected_mid():
    cfg = toy_cache_config()
    rng = np.random.default_rng(10)
    cache = fill_cache(cfg, 10, rng)
    current = (np.zeros((cfg.tokens_per_block, 4, 16)),
               np.zeros((cfg.tokens_per_block, 4, 16)))
    keys_none, _ = cache.assemble_context([], 1, current)
    assert keys_none.shape[0] == cfg.context_token_count(0)


def test_assemble_context_validates_selection():
    cfg = toy_cache_config()
    rng = np.random.default_rng(11)
    cache = fill_cache(cfg, 10, rng)
    current = (np.zeros((cfg.tokens_per_block, 4, 16)),
               np.zeros((cfg.tokens_per_block, 4, 16)))
    with pytest.raises(ValueError, match="ascending"):
        cache.assemble_context([4, 3], 0, current)
    with pytest.raises(ValueError, match="not resident"):
        cache.assemble_context([2, 41], 0, current)
    with pytest.raises(ValueError, match="layer 5 out of range"):
        cache.assemble_context([], 5, current)


def test_context_token_count_reference_figures():
    cfg = CacheConfig(tokens_per_block=6240, tokens_per_compressed=182, layers=30,
                      n_heads=12, rope=RopeConfig(128, (44, 42, 42)))
    assert cfg.context_token_count(16) == 12480 + 2912 + 12480 == 27872
    assert cfg.sink_blocks == 2
    assert cfg.recent_blocks == 1


def test_worked_context_arithmetic_through_assembly():
    # sink 2 blocks + 2 selected mid + recent + current at toy sizes
    cfg = toy_cache_config()
    rng = np.random.default_rng(12)
    cache = fill_cache(cfg, 8, rng)
    current = (rng.standard_normal((192, 4, 16)), rng.standard_normal((192, 4, 16)))
    selected = list(cache.mid_indices())[:2]
    keys, _ = cache.assemble_context(selected, 0, current)
    assert keys.shape[0] == 2 * 192 + 2 * 4 + 192 + 192 == 776


def test_worked_context_arithmetic_with_wider_entries():
    # same assembly with 8-token compressed entries and 4 selected
    cfg = toy_cache_config(tokens_per_compressed=8)
    rng = np.random.default_rng(14)
    cache = fill_cache(cfg, 10, rng)
    current = (rng.standard_normal((192, 4, 16)), rng.standard_normal((192, 4, 16)))
    selected = list(cache.mid_indices())[:4]
    keys, _ = cache.assemble_context(selected, 0, current)
    assert keys.shape[0] == 2 * 192 + 4 * 8 + 192 + 192 == 800
    assert keys.shape[0] == cfg.context_token_count(4)


def test_memory_report_reference_numbers():
    cfg = CacheConfig(tokens_per_block=6240, tokens_per_compressed=182, layers=30,
                      n_heads=12, rope=RopeConfig(128, (44, 42, 42)))
    rep = memory_report(cfg, duration_s=120.0, fps=16, temporal_stride=4)
    assert rep.total_tokens == 748800
    assert rep.full_bytes == 138_018_816_000
    assert rep.bounded_tokens == 27872
    assert rep.bounded_bytes == 5_137_367_040
    assert 26.0 < rep.reduction < 27.5
    assert rep.stored_bytes < rep.full_bytes


def test_memory_report_scales_linearly_in_duration():
    cfg = toy_cache_config()
    one = memory_report(cfg, 60.0, fps=8, temporal_stride=4)
    two = memory_report(cfg, 120.0, fps=8, temporal_stride=4)
    assert two.total_tokens == 2 * one.total_tokens
    assert two.bounded_tokens == one.bounded_tokens


def test_live_context_bytes_counts_both_tensors():
    cfg = toy_cache_config()
    got = live_context_bytes(cfg, 100)
    assert got == 100 * cfg.layers * 2 * cfg.n_heads * cfg.head_dim * 2


def test_config_validation_messages():
    with pytest.raises(ValueError, match="sink_frames 10 not divisible"):
        toy_cache_config(sink_frames=10)
    with pytest.raises(ValueError, match="top_k 80 exceeds mid_capacity"):
        toy_cache_config(top_k=80)
    with pytest.raises(ValueError, match="layers must be >= 1"):
        toy_cache_config(layers=0)


def test_append_rejects_malformed_kv():
    cfg = toy_cache_config()
    rng = np.random.default_rng(13)
    cache = PartitionedCache(cfg)
    bad = BlockKV(0, [rng.standard_normal((10, 4, 16))] * 2,
                  [rng.standard_normal((10, 4, 16))] * 2)
    with pytest.raises(ValueError, match="KV shape"):
        cache.append_block(bad)
