"""Three-tier attention KV cache with a bounded footprint.

Partitions, oldest to newest:

* sink -- the first blocks of the stream, kept at full resolution forever;
* mid -- a capacity-bounded ring of compressed block entries;
* recent -- the last block(s) at full resolution, plus the block being
  generated, which is passed in per forward rather than stored.

Warm-up fills sink first, then recent.  Once recent is full, the block
aging out of it drops its full KV and its pre-computed compressed backup
joins mid.  When mid overflows, the oldest entries are evicted and the sink
keys are rotated forward by the evicted frame span (`temporal_shift`), so
the sink stays positionally adjacent to the earliest surviving mid entry.
Sink values and block identities never change; only sink keys rotate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from streamkv.compressor import CompressedEntry
from streamkv.errors import ContractViolation
from streamkv.rope import RopeConfig, temporal_shift

__all__ = [
    "CacheConfig", "BlockKV", "PartitionedCache", "MemoryReport",
    "memory_report", "live_context_bytes",
]


@dataclass(frozen=True)
class CacheConfig:
    """Shape and policy parameters of the partitioned cache.

    ``tokens_per_block`` (n) and ``tokens_per_compressed`` (N_c) are plain
    inputs here; the generator derives them from its geometry.
    """

    tokens_per_block: int
    tokens_per_compressed: int
    layers: int
    n_heads: int
    rope: RopeConfig
    frames_per_block: int = 4
    sink_frames: int = 8
    recent_frames: int = 4
    top_k: int = 16
    mid_capacity: int = 64
    eviction_delta: int = 1

    def __post_init__(self):
        positive = ("tokens_per_block", "tokens_per_compressed", "layers", "n_heads",
                    "frames_per_block", "sink_frames", "recent_frames", "top_k",
                    "mid_capacity", "eviction_delta")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.sink_frames % self.frames_per_block:
            raise ValueError(
                f"sink_frames {self.sink_frames} not divisible by frames_per_block "
                f"{self.frames_per_block}")
        if self.recent_frames % self.frames_per_block:
            raise ValueError(
                f"recent_frames {self.recent_frames} not divisible by frames_per_block "
                f"{self.frames_per_block}")
        if self.top_k > self.mid_capacity:
            raise ValueError(
                f"top_k {self.top_k} exceeds mid_capacity {self.mid_capacity}")

    @property
    def sink_blocks(self) -> int:
        return self.sink_frames // self.frames_per_block

    @property
    def recent_blocks(self) -> int:
        return self.recent_frames // self.frames_per_block

    @property
    def head_dim(self) -> int:
        return self.rope.head_dim

    def context_token_count(self, num_selected: int) -> int:
        """Tokens attended per forward: sink + selected mid + recent + current."""
        return (self.sink_blocks * self.tokens_per_block
                + num_selected * self.tokens_per_compressed
                + (self.recent_blocks + 1) * self.tokens_per_block)


@dataclass
class BlockKV:
    """Full-resolution per-layer KV of one finished block.

    ``q0`` optionally carries the block's first-layer queries so the router
    can score without re-running the model on recent blocks.
    """

    block_index: int
    keys: list = field(repr=False, default_factory=list)
    values: list = field(repr=False, default_factory=list)
    q0: np.ndarray | None = field(repr=False, default=None)


@dataclass
class _RecentSlot:
    block: BlockKV
    backup: CompressedEntry


class PartitionedCache:
    def __init__(self, cfg: CacheConfig):
        self.cfg = cfg
        self.sink: list[BlockKV] = []
        self.mid: list[CompressedEntry] = []
        self.recent: list[_RecentSlot] = []
        self.evicted_frames = 0       # cumulative rotation applied to sink keys
        self.eviction_events = 0
        self.correction_flops = 0
        self._next_index = 0

    # -- bookkeeping ---------------------------------------------------------

    def partition_sizes(self) -> tuple[int, int, int]:
        return len(self.sink), len(self.mid), len(self.recent)

    def mid_indices(self) -> tuple[int, ...]:
        return tuple(entry.block_index for entry in self.mid)

    def sink_frame_range(self) -> tuple[int, int]:
        """Effective (first, last+1) frame positions the sink keys encode."""
        return self.evicted_frames, self.evicted_frames + self.cfg.sink_frames

    def earliest_mid_start_frame(self) -> int | None:
        if not self.mid:
            return None
        return self.mid[0].block_index * self.cfg.frames_per_block

    # -- mutation ------------------------------------------------------------

    def _check_block(self, block: BlockKV) -> None:
        cfg = self.cfg
        shape = (cfg.tokens_per_block, cfg.n_heads, cfg.head_dim)
        if len(block.keys) != cfg.layers or len(block.values) != cfg.layers:
            raise ValueError(
                f"block {block.block_index} carries {len(block.keys)} KV layers, "
                f"cache expects {cfg.layers}")
        for arr in (*block.keys, *block.values):
            if arr.shape != shape:
                raise ValueError(
                    f"block {block.block_index}: KV shape {arr.shape}, expected {shape}")

    def _check_backup(self, block_index: int, backup: CompressedEntry) -> None:
        cfg = self.cfg
        if backup.block_index != block_index:
            raise ValueError(
                f"backup is for block {backup.block_index}, appended block is {block_index}")
        if backup.num_tokens != cfg.tokens_per_compressed:
            raise ValueError(
                f"backup holds {backup.num_tokens} tokens, cache expects "
                f"{cfg.tokens_per_compressed}")
        shape = (cfg.tokens_per_compressed, cfg.n_heads, cfg.head_dim)
        if len(backup.keys) != cfg.layers or any(k.shape != shape for k in backup.keys):
            raise ValueError(f"backup KV layout does not match cache config {shape}")

    def append_block(self, block: BlockKV, backup: CompressedEntry | None = None) -> None:
        """Admit a finished block; may cascade a recent block into mid.

        Blocks must arrive in index order.  While the sink is filling, the
        backup is unused (the sink is never compressed); afterwards it is
        mandatory, since the block will eventually continue life as its
        compressed form.
        """
        if block.block_index != self._next_index:
            raise ContractViolation(
                f"append order: expected block {self._next_index}, got {block.block_index}")
        self._check_block(block)
        if len(self.sink) < self.cfg.sink_blocks:
            if backup is not None:
                self._check_backup(block.block_index, backup)
            self.sink.append(block)
        else:
            if backup is None:
                raise ContractViolation(
                    f"block {block.block_index} enters the recent window and needs a backup")
            self._check_backup(block.block_index, backup)
            self.recent.append(_RecentSlot(block, backup))
            while len(self.recent) > self.cfg.recent_blocks:
                aged = self.recent.pop(0)
                self.mid.append(aged.backup)
            while len(self.mid) > self.cfg.mid_capacity:
                self.evict_mid(self.cfg.eviction_delta)
        self._next_index += 1

    def evict_mid(self, count: int | None = None) -> int:
        """Drop the oldest ``count`` mid entries and rotate sink keys forward.

        Returns the frame delta applied.  count 0 is an exact no-op.
        """
        if count is None:
            count = self.cfg.eviction_delta
        if count < 0 or count > len(self.mid):
            raise ValueError(f"cannot evict {count} of {len(self.mid)} mid entries")
        if count == 0:
            return 0
        del self.mid[:count]
        delta = count * self.cfg.frames_per_block
        d_t = self.cfg.rope.split[0]
        for block in self.sink:
            block.keys = [temporal_shift(k, delta, self.cfg.rope) for k in block.keys]
        self.evicted_frames += delta
        self.eviction_events += 1
        pairs = (len(self.sink) * self.cfg.tokens_per_block * self.cfg.n_heads
                 * (d_t // 2) * self.cfg.layers)
        self.correction_flops += 6 * pairs  # 4 mults + 2 adds per rotated pair
        return delta

    # -- reads ---------------------------------------------------------------

    def assemble_context(self, selected_mid, layer: int,
                         current_kv: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """Concatenate sink, selected mid, recent and current KV for one layer.

        ``selected_mid`` is a strictly ascending list of mid block indices.
        The result is ordered oldest to newest.
        """
        cfg = self.cfg
        if not 0 <= layer < cfg.layers:
            raise ValueError(f"layer {layer} out of range for {cfg.layers} layers")
        selected = list(selected_mid)
        if selected != sorted(set(selected)):
            raise ValueError(f"selected mid indices must be strictly ascending, got {selected}")
        known = set(self.mid_indices())
        unknown = [i for i in selected if i not in known]
        if unknown:
            raise ValueError(f"selected mid blocks {unknown} are not resident")
        k_cur, v_cur = current_kv
        shape = (cfg.tokens_per_block, cfg.n_heads, cfg.head_dim)
        if k_cur.shape != shape or v_cur.shape != shape:
            raise ValueError(f"current KV shape {k_cur.shape}, expected {shape}")
        wanted = set(selected)
        keys = [b.keys[layer] for b in self.sink]
        values = [b.values[layer] for b in self.sink]
        for entry in self.mid:
            if entry.block_index in wanted:
                keys.append(entry.keys[layer])
                values.append(entry.values[layer])
        for slot in self.recent:
            keys.append(slot.block.keys[layer])
            values.append(slot.block.values[layer])
        keys.append(k_cur)
        values.append(v_cur)
        return np.concatenate(keys, axis=0), np.concatenate(values, axis=0)


# ---------------------------------------------------------------------------
# memory accounting


@dataclass(frozen=True)
class MemoryReport:
    duration_s: float
    total_tokens: int
    full_bytes: int
    bounded_tokens: int
    bounded_bytes: int
    stored_tokens: int
    stored_bytes: int

    @property
    def reduction(self) -> float:
        return self.full_bytes / self.bounded_bytes


def _kv_bytes(tokens: int, cfg: CacheConfig, bytes_per_scalar: int) -> int:
    return tokens * cfg.layers * 2 * cfg.n_heads * cfg.head_dim * bytes_per_scalar


def live_context_bytes(cfg: CacheConfig, context_tokens: int,
                       bytes_per_scalar: int = 2) -> int:
    """KV bytes touched by one attention pass over ``context_tokens``."""
    return _kv_bytes(context_tokens, cfg, bytes_per_scalar)


def memory_report(cfg: CacheConfig, duration_s: float, fps: int,
                  temporal_stride: int, bytes_per_scalar: int = 2) -> MemoryReport:
    """Contrast an uncompressed full-history cache with the bounded one.

    ``full`` counts KV for every token of the whole clip; ``bounded`` counts
    the fixed attention context; ``stored`` adds what the cache keeps
    resident (sink + recent + current buffers and a full mid ring).
    """
    if fps < 1 or temporal_stride < 1:
        raise ValueError("fps and temporal_stride must be >= 1")
    if duration_s <= 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    if cfg.tokens_per_block % cfg.frames_per_block:
        raise ValueError("tokens_per_block must divide evenly across its frames")
    frames = int(round(duration_s * fps))
    latent_frames = frames // temporal_stride
    tokens_per_frame = cfg.tokens_per_block // cfg.frames_per_block
    total = latent_frames * tokens_per_frame
    bounded = cfg.context_token_count(cfg.top_k)
    stored = ((cfg.sink_blocks + cfg.recent_blocks + 1) * cfg.tokens_per_block
              + cfg.mid_capacity * cfg.tokens_per_compressed)
    return MemoryReport(
        duration_s=duration_s,
        total_tokens=total,
        full_bytes=_kv_bytes(total, cfg, bytes_per_scalar),
        bounded_tokens=bounded,
        bounded_bytes=_kv_bytes(bounded, cfg, bytes_per_scalar),
        stored_tokens=stored,
        stored_bytes=_kv_bytes(stored, cfg, bytes_per_scalar),
    )
