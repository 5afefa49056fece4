"""Affinity routing: pick which compressed mid blocks join the context.

Scores are plain scaled dot products between a deterministic subsample of
the current queries and every compressed key, summed per block; no softmax,
so scores are comparable across candidates and linear in the queries.
Scoring runs once per block at the first denoising step (and can be shared
across neighbouring blocks via ``refresh_interval``); later steps replay
the cached selection at zero scoring cost.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from streamkv.errors import ContractViolation

__all__ = [
    "SelectionConfig", "subsample_queries", "score_blocks", "select_topk",
    "Router", "SelectionRecord", "SelectionTrace",
]


@dataclass(frozen=True)
class SelectionConfig:
    top_k: int
    gamma: float = 0.25
    min_queries: int = 32
    half_heads: bool = True
    refresh_interval: int = 1

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.min_queries < 1:
            raise ValueError(f"min_queries must be >= 1, got {self.min_queries}")
        if self.refresh_interval < 1:
            raise ValueError(f"refresh_interval must be >= 1, got {self.refresh_interval}")


def subsample_queries(num_queries: int, cfg: SelectionConfig) -> np.ndarray:
    """Deterministic uniformly spaced query indices, ascending.

    Keeps max(min_queries, floor(gamma * n)) queries, capped at n.
    """
    if num_queries < 1:
        raise ValueError(f"num_queries must be >= 1, got {num_queries}")
    count = min(num_queries, max(cfg.min_queries, int(np.floor(cfg.gamma * num_queries))))
    return np.arange(count, dtype=np.int64) * num_queries // count


def _optimized_heads(n_heads: int, cfg: SelectionConfig) -> int:
    return max(1, n_heads // 2) if cfg.half_heads else n_heads


def score_blocks(queries: np.ndarray, mid_keys, cfg: SelectionConfig) -> np.ndarray:
    """Summed query/key affinity per candidate block.

    ``queries`` are already subsampled, (M_q, N_h, d_h); ``mid_keys`` is a
    sequence of (N_c, N_h, d_h) arrays.  Only the first half of the heads
    contributes when ``half_heads`` is set.
    """
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 3:
        raise ValueError(f"queries must be (M_q, N_h, d_h), got shape {queries.shape}")
    n_heads, head_dim = queries.shape[1:]
    n_opt = _optimized_heads(n_heads, cfg)
    q = queries[:, :n_opt, :]
    scale = 1.0 / (n_opt * np.sqrt(head_dim))
    scores = np.empty(len(mid_keys))
    for m, keys in enumerate(mid_keys):
        keys = np.asarray(keys, dtype=np.float64)
        if keys.shape[1:] != (n_heads, head_dim):
            raise ValueError(
                f"candidate {m} has head layout {keys.shape[1:]}, queries have "
                f"{(n_heads, head_dim)}")
        scores[m] = np.einsum("qhd,khd->", q, keys[:, :n_opt, :]) * scale
    return scores


def select_topk(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest scores, ties to the smaller index, ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError(f"scores must be one-dimensional, got shape {scores.shape}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k >= scores.size:
        return list(range(scores.size))
    order = np.argsort(-scores, kind="stable")[:k]
    return sorted(int(i) for i in order)


@dataclass(frozen=True)
class SelectionRecord:
    step: int            # global routing-call counter
    block: int
    step_in_block: int
    scored: bool
    num_candidates: int
    selected: tuple
    scores: tuple        # empty when no scoring has run for this selection


class SelectionTrace:
    """Per-step routing log with a stable CSV schema.

    Columns: step, block, step_in_block, scored, num_candidates, selected,
    scores.  ``selected`` and ``scores`` are ';'-joined; scores use repr so
    the round trip is exact.
    """

    COLUMNS = ("step", "block", "step_in_block", "scored",
               "num_candidates", "selected", "scores")

    def __init__(self):
        self.rows: list[SelectionRecord] = []

    def append(self, record: SelectionRecord) -> None:
        self.rows.append(record)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for r in self.rows:
                writer.writerow([
                    r.step, r.block, r.step_in_block, int(r.scored), r.num_candidates,
                    ";".join(str(i) for i in r.selected),
                    ";".join(repr(s) for s in r.scores),
                ])

    @staticmethod
    def read_csv(path) -> list[SelectionRecord]:
        out = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                selected = tuple(int(v) for v in row["selected"].split(";") if v)
                scores = tuple(float(v) for v in row["scores"].split(";") if v)
                out.append(SelectionRecord(
                    int(row["step"]), int(row["block"]), int(row["step_in_block"]),
                    bool(int(row["scored"])), int(row["num_candidates"]), selected, scores))
        return out


class Router:
    """Stateful routing front-end over score_blocks/select_topk.

    Selections are keyed by absolute block index so they stay valid while
    mid grows; a cached selection is rescored early only when one of its
    blocks was evicted.  Routing never mutates the candidate entries.
    """

    def __init__(self, cfg: SelectionConfig):
        self.cfg = cfg
        self.scoring_calls = 0
        self.scoring_flops = 0
        self.trace = SelectionTrace()
        self._step = 0
        self._cached: list[int] | None = None
        self._cached_scores: tuple = ()
        self._cached_block: int | None = None
        self._last_scored_block: int | None = None

    def route(self, mid_entries, queries: np.ndarray | None,
              step_index: int, block_index: int) -> list[int]:
        """Selected mid block indices (ascending) for one denoising step.

        ``queries`` (full, un-subsampled) are only consulted when this call
        actually scores: at step 1 when the cached selection expired.  Steps
        after the first replay the block's step-1 selection verbatim.
        """
        if step_index < 1:
            raise ValueError(f"step_index is 1-based, got {step_index}")
        indices = [entry.block_index for entry in mid_entries]
        scored = False

        if step_index > 1:
            if self._cached_block != block_index:
                raise ContractViolation(
                    f"step {step_index} of block {block_index} routed before step 1")
            selection = list(self._cached)
        elif len(indices) <= self.cfg.top_k:
            # nothing to rank: every candidate fits
            selection = indices
            self._cached_scores = ()
            self._last_scored_block = None
        else:
            stale = (self._last_scored_block is None
                     or block_index - self._last_scored_block >= self.cfg.refresh_interval
                     or not set(self._cached).issubset(indices))
            if stale:
                if queries is None:
                    raise ValueError("scoring step needs queries")
                sub = subsample_queries(queries.shape[0], self.cfg)
                sub_q = queries[sub]
                keys = [entry.keys[0] for entry in mid_entries]
                scores = score_blocks(sub_q, keys, self.cfg)
                picked = select_topk(scores, self.cfg.top_k)
                selection = [indices[i] for i in picked]
                self._cached_scores = tuple(float(s) for s in scores)
                self._last_scored_block = block_index
                self.scoring_calls += 1
                n_opt = _optimized_heads(queries.shape[1], self.cfg)
                total_keys = sum(entry.num_tokens for entry in mid_entries)
                self.scoring_flops += sub_q.shape[0] * total_keys * n_opt * queries.shape[2]
                scored = True
            else:
                selection = list(self._cached)

        if step_index == 1:
            self._cached = list(selection)
            self._cached_block = block_index

        self._step += 1
        self.trace.append(SelectionRecord(
            self._step, block_index, step_index, scored, len(indices),
            tuple(selection), self._cached_scores))
        return list(selection)
