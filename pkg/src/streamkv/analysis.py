"""Offline diagnostics for routing behaviour.

Everything here consumes either plain arrays or the selection trace CSV a
run writes; nothing touches the live cache.  The strategy bench runs on a
synthetic workload with one planted high-affinity block, so the ranking of
retention policies has a known right answer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from streamkv.selector import SelectionTrace, select_topk

__all__ = [
    "importance_profile", "jaccard_distance", "selection_churn",
    "position_diversity", "load_selection_history", "Workload",
    "make_planted_workload", "strategy_bench", "STRATEGIES", "StrategyResult",
]

STRATEGIES = ("random", "fifo", "dynamic")


def importance_profile(score_vectors, num_buckets: int = 10):
    """Mean score by relative position in the candidate list.

    Each vector of M scores is bucketed by floor(num_buckets * j / M) for
    0-based position j, then averaged across vectors.  Returns (means,
    counts); buckets that never receive a sample hold NaN with count 0.
    """
    if num_buckets < 1:
        raise ValueError(f"num_buckets must be >= 1, got {num_buckets}")
    sums = np.zeros(num_buckets)
    counts = np.zeros(num_buckets, dtype=np.int64)
    for vec in score_vectors:
        vec = np.asarray(vec, dtype=np.float64)
        m = vec.size
        if m == 0:
            continue
        buckets = (num_buckets * np.arange(m)) // m
        np.add.at(sums, buckets, vec)
        np.add.at(counts, buckets, 1)
    means = np.full(num_buckets, np.nan)
    filled = counts > 0
    means[filled] = sums[filled] / counts[filled]
    return means, counts


def jaccard_distance(a, b) -> float:
    """1 - |a & b| / |a | b|; two empty sets count as identical."""
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 0.0
    return 1.0 - len(a & b) / len(union)


def selection_churn(selections) -> np.ndarray:
    """Jaccard distance between each consecutive pair of selections."""
    sets = [set(s) for s in selections]
    return np.array([jaccard_distance(sets[i], sets[i + 1])
                     for i in range(len(sets) - 1)])


def position_diversity(selections, candidate_counts, window: int = 10) -> np.ndarray:
    """Fraction of the candidate pool touched by the trailing window.

    Entry t is |union of the last ``window`` selections up to t| divided by
    the candidate count at t (0 when there were no candidates).
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    selections = [set(s) for s in selections]
    if len(candidate_counts) != len(selections):
        raise ValueError(
            f"{len(selections)} selections but {len(candidate_counts)} candidate counts")
    out = np.zeros(len(selections))
    for t in range(len(selections)):
        pool = candidate_counts[t]
        if pool <= 0:
            continue
        touched = set()
        for s in selections[max(0, t - window + 1): t + 1]:
            touched |= s
        out[t] = len(touched) / pool
    return out


def load_selection_history(path):
    """Per-block selections from a selection trace CSV.

    Returns (selections, candidate_counts, score_vectors): one selection
    and count per block (its step-1 row), and one score vector per fresh
    scoring event.
    """
    records = SelectionTrace.read_csv(path)
    selections, counts, score_vectors = [], [], []
    for r in records:
        if r.step_in_block == 1:
            selections.append(r.selected)
            counts.append(r.num_candidates)
            if r.scored:
                score_vectors.append(np.array(r.scores))
    return selections, counts, score_vectors


@dataclass(frozen=True)
class Workload:
    keys: np.ndarray       # (num_blocks, keys_per_block, dim)
    queries: np.ndarray    # (num_steps, queries_per_step, dim)
    planted_block: int
    budget_pressure: int   # candidates at step t = min(num_blocks, pressure + t)
    seed: int


def make_planted_workload(seed: int = 0, num_blocks: int = 24, keys_per_block: int = 8,
                          dim: int = 24, num_steps: int = 16, queries_per_step: int = 4,
                          planted_strength: float = 3.0) -> Workload:
    """Random keys with block 0 aligned to the query direction.

    Queries cluster around a fixed unit direction; block 0's keys carry a
    strong component along it, so any affinity-aware policy should keep
    block 0 while oblivious ones drop it as the pool grows.
    """
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    keys = rng.standard_normal((num_blocks, keys_per_block, dim)) / np.sqrt(dim)
    keys[0] = planted_strength * direction + 0.1 * rng.standard_normal((keys_per_block, dim))
    queries = direction + 0.2 * rng.standard_normal((num_steps, queries_per_step, dim))
    return Workload(keys=keys, queries=queries, planted_block=0,
                    budget_pressure=1, seed=seed)


@dataclass(frozen=True)
class StrategyResult:
    mean_retained_mass: float
    per_step: np.ndarray


def _block_mass(keys: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Softmax probability mass per block, averaged over queries."""
    m, per_block, dim = keys.shape
    flat = keys.reshape(m * per_block, dim)
    logits = queries @ flat.T / np.sqrt(dim)            # (n_q, m * per_block)
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs.reshape(len(queries), m, per_block).sum(axis=2).mean(axis=0)


def strategy_bench(workload: Workload, strategies=STRATEGIES, budget: int = 4) -> dict:
    """Softmax mass retained by each cache policy under growing pressure.

    At step t the candidate pool is the first min(M, pressure + budget + t)
    blocks; each policy keeps at most ``budget`` of them.  Retained mass is
    the fraction of the full-attention softmax mass carried by the kept
    blocks, so 1.0 means the policy is lossless for that step.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    for name in strategies:
        if name not in STRATEGIES:
            raise ValueError(f"unknown strategy {name!r}: expected one of {STRATEGIES}")
    num_blocks = workload.keys.shape[0]
    results = {name: [] for name in strategies}
    for t, queries in enumerate(workload.queries):
        pool = min(num_blocks, workload.budget_pressure + budget + t)
        keys = workload.keys[:pool]
        mass = _block_mass(keys, queries)
        if pool <= budget:
            kept = {name: list(range(pool)) for name in strategies}
        else:
            kept = {}
            if "fifo" in strategies:
                kept["fifo"] = list(range(pool - budget, pool))
            if "random" in strategies:
                rng = np.random.default_rng([workload.seed, 7, t])
                kept["random"] = sorted(rng.choice(pool, size=budget, replace=False))
            if "dynamic" in strategies:
                affinity = np.einsum("qd,mkd->m", queries, keys)
                kept["dynamic"] = select_topk(affinity, budget)
        for name in strategies:
            results[name].append(float(mass[list(kept[name])].sum()))
    return {name: StrategyResult(float(np.mean(vals)), np.array(vals))
            for name, vals in results.items()}
