"""Block-wise latent rollout with a partitioned KV cache.

The model here is a deliberately small block-causal transformer over patch
tokens; it exists to exercise the cache, codec and routing machinery with
realistic shapes, not to produce watchable video.  Denoising follows a
rectified-flow schedule: each step predicts a velocity, takes the full jump
to the clean estimate, then re-noises at the next sigma with fresh noise.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from streamkv import codec, numerics
from streamkv.cache import BlockKV, CacheConfig, PartitionedCache, live_context_bytes
from streamkv.codec import CodecSpec, LatentBlock, patch_embed, token_positions, unpatch
from streamkv.compressor import Compressor, CompressorSpec
from streamkv.errors import GenerationError
from streamkv.rope import RopeConfig, apply_rope
from streamkv.selector import Router, SelectionConfig

__all__ = [
    "sigma_schedule", "flow_interpolate", "velocity_target", "ToyModel",
    "FlopCounters", "denoise_block", "generate", "GenerationResult",
    "CacheTraceRow", "CACHE_TRACE_COLUMNS",
]


def sigma_schedule(steps: int, shift: float) -> np.ndarray:
    """Noise levels sigma_1 > ... > sigma_S > sigma_{S+1} = 0.

    Uniform levels u = 1 - (s-1)/S are warped by
    sigma = shift * u / (1 + (shift - 1) * u), which concentrates steps at
    high noise for shift > 1.  Endpoints are exact: sigma_1 = 1, last = 0.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if shift <= 0:
        raise ValueError(f"shift must be positive, got {shift}")
    u = 1.0 - np.arange(steps + 1, dtype=np.float64) / steps
    sigmas = shift * u / (1.0 + (shift - 1.0) * u)
    # shift/(1 + (shift-1)) can land one ulp off 1.0; the endpoints are a
    # documented contract, so pin them
    sigmas[0] = 1.0
    sigmas[-1] = 0.0
    return sigmas


def flow_interpolate(x0: np.ndarray, eps: np.ndarray, sigma: float) -> np.ndarray:
    """Linear path point (1 - sigma) * x0 + sigma * eps."""
    return (1.0 - sigma) * x0 + sigma * eps


def velocity_target(x0: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Ground-truth velocity eps - x0, constant along the linear path."""
    return eps - x0


def _layer_norm(x: np.ndarray) -> np.ndarray:
    # parameter-free: zero mean, unit variance over the channel axis
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-6)


@dataclass
class FlopCounters:
    attention_flops: int = 0
    forwards: int = 0


class ToyModel:
    """Small pre-LN transformer over 1x2x2 patch tokens.

    Weights are fixed at construction from a seeded generator; there is no
    training.  ``forward`` leaves context assembly to a caller-supplied
    ``context_fn(layer, k_current, v_current) -> (K, V)`` so the same model
    runs against the partitioned cache, a flat history, or a bare block.
    """

    def __init__(self, frames_per_block: int, channels: int, latent_height: int,
                 latent_width: int, width: int, n_heads: int, layers: int,
                 rope: RopeConfig, mlp_ratio: int = 4, global_tokens: int = 0,
                 seed: int = 0):
        if width % n_heads != 0:
            raise ValueError(f"width {width} not divisible by n_heads {n_heads}")
        if latent_height % 2 or latent_width % 2:
            raise ValueError(
                f"latent grid {latent_height}x{latent_width} must be even for 2x2 patches")
        if rope.head_dim != width // n_heads:
            raise ValueError(
                f"rope head_dim {rope.head_dim} != width/n_heads {width // n_heads}")
        self.frames_per_block = frames_per_block
        self.channels = channels
        self.latent_height = latent_height
        self.latent_width = latent_width
        self.width = width
        self.n_heads = n_heads
        self.head_dim = width // n_heads
        self.n_layers = layers
        self.rope = rope

        d = width
        d_in = channels * 4
        hidden = mlp_ratio * d
        rng = np.random.default_rng(seed)
        self.patch_in = rng.standard_normal((d_in, d)) / np.sqrt(d_in)
        self.sigma_embed = rng.standard_normal(d)
        self.layers = []
        for _ in range(layers):
            self.layers.append({
                "wq": rng.standard_normal((d, d)) / np.sqrt(d),
                "wk": rng.standard_normal((d, d)) / np.sqrt(d),
                "wv": rng.standard_normal((d, d)) / np.sqrt(d),
                "wo": rng.standard_normal((d, d)) / np.sqrt(d),
                "w1": rng.standard_normal((d, hidden)) / np.sqrt(d),
                "b1": np.zeros(hidden),
                "w2": rng.standard_normal((hidden, d)) / np.sqrt(hidden),
                "b2": np.zeros(d),
            })
        self.out_proj = rng.standard_normal((d, d_in)) / np.sqrt(d)

        # optional learned-register stand-ins, visible at every layer,
        # never rotated and never cached
        self.global_tokens = global_tokens
        self._global_kv = []
        if global_tokens:
            g = rng.standard_normal((global_tokens, d)) / np.sqrt(d)
            for layer in self.layers:
                gk = (g @ layer["wk"]).reshape(global_tokens, n_heads, self.head_dim)
                gv = (g @ layer["wv"]).reshape(global_tokens, n_heads, self.head_dim)
                self._global_kv.append((gk, gv))

    @property
    def block_shape(self) -> tuple:
        return (self.frames_per_block, self.channels,
                self.latent_height, self.latent_width)

    @property
    def tokens_per_block(self) -> int:
        return self.frames_per_block * (self.latent_height // 2) * (self.latent_width // 2)

    def kv_weights(self) -> list:
        """Per-layer (wk, wv) pairs, shared with the compressor."""
        return [(layer["wk"], layer["wv"]) for layer in self.layers]

    def _embed(self, latents: np.ndarray, sigma: float) -> np.ndarray:
        tokens = patch_embed(latents, self.patch_in)
        return tokens + sigma * self.sigma_embed

    def _positions(self, block_index: int) -> np.ndarray:
        return token_positions(block_index * self.frames_per_block,
                               self.frames_per_block,
                               self.latent_height // 2, self.latent_width // 2)

    def layer0_queries(self, latents: np.ndarray, sigma: float,
                       block_index: int) -> np.ndarray:
        """Rotated layer-0 queries, (n, N_h, d_h); used for routing."""
        x = _layer_norm(self._embed(latents, sigma))
        n = x.shape[0]
        q = (x @ self.layers[0]["wq"]).reshape(n, self.n_heads, self.head_dim)
        return apply_rope(q, self._positions(block_index), self.rope)

    def forward(self, latents: np.ndarray, sigma: float, block_index: int,
                context_fn, counters: FlopCounters | None = None):
        """One pass; returns (velocity, per-layer (k, v), layer-0 queries).

        The returned keys are rotated at their absolute positions and the
        values unrotated, i.e. exactly what the cache stores.
        """
        if latents.shape != self.block_shape:
            raise ValueError(
                f"latents shape {latents.shape} != block shape {self.block_shape}")
        positions = self._positions(block_index)
        x = self._embed(latents, sigma)
        n = x.shape[0]
        q0 = None
        kv_layers = []
        for idx, layer in enumerate(self.layers):
            xn = _layer_norm(x)
            q = apply_rope((xn @ layer["wq"]).reshape(n, self.n_heads, self.head_dim),
                           positions, self.rope)
            k_cur = apply_rope((xn @ layer["wk"]).reshape(n, self.n_heads, self.head_dim),
                               positions, self.rope)
            v_cur = (xn @ layer["wv"]).reshape(n, self.n_heads, self.head_dim)
            if idx == 0:
                q0 = q
            kv_layers.append((k_cur, v_cur))
            keys, values = context_fn(idx, k_cur, v_cur)
            if self.global_tokens:
                gk, gv = self._global_kv[idx]
                keys = np.concatenate([gk, keys], axis=0)
                values = np.concatenate([gv, values], axis=0)
            attended = numerics.attention(q, keys, values)
            if counters is not None:
                counters.attention_flops += 4 * n * keys.shape[0] * self.n_heads * self.head_dim
            x = x + attended.reshape(n, self.width) @ layer["wo"]
            xm = _layer_norm(x)
            x = x + numerics.silu(xm @ layer["w1"] + layer["b1"]) @ layer["w2"] + layer["b2"]
        if counters is not None:
            counters.forwards += 1
        out = _layer_norm(x) @ self.out_proj
        velocity = unpatch(out, self.block_shape)
        return velocity, kv_layers, q0


def _routing_queries(model: ToyModel, cache: PartitionedCache,
                     latents: np.ndarray, sigma: float, block_index: int) -> np.ndarray:
    """Layer-0 queries from the recent partition plus the current block."""
    parts = [slot.block.q0 for slot in cache.recent if slot.block.q0 is not None]
    parts.append(model.layer0_queries(latents, sigma, block_index))
    return np.concatenate(parts, axis=0)


def denoise_block(model: ToyModel, context_for, route_for, schedule: np.ndarray,
                  block_index: int, rng: np.random.Generator,
                  counters: FlopCounters | None = None, velocity_fn=None):
    """Run the full denoising loop for one block.

    ``route_for(step, latents, sigma)`` yields the mid selection for that
    step; ``context_for(selected)`` yields the model's context_fn.
    ``velocity_fn(z, sigma)``, when given, replaces the model's velocity
    while keeping the exact noise draw order (used to test the update rule
    against an oracle).  Returns (clean latents, last selection).
    """
    z = rng.standard_normal(model.block_shape)
    steps = len(schedule) - 1
    selected = []
    z_hat = z
    for s in range(1, steps + 1):
        sigma_s = float(schedule[s - 1])
        selected = route_for(s, z, sigma_s)
        if velocity_fn is not None:
            velocity = velocity_fn(z, sigma_s)
        else:
            velocity, _, _ = model.forward(z, sigma_s, block_index,
                                           context_for(selected), counters)
        z_hat = z - sigma_s * velocity
        sigma_next = float(schedule[s])
        if sigma_next > 0.0:
            z = flow_interpolate(z_hat, rng.standard_normal(model.block_shape), sigma_next)
        else:
            z = z_hat
    return z_hat, selected


CACHE_TRACE_COLUMNS = (
    "block", "sink_blocks", "mid_blocks", "recent_blocks", "evicted_frames",
    "selected", "context_tokens", "context_bytes", "full_history_tokens",
    "attention_flops", "scoring_flops", "correction_flops", "frames_decoded",
)


@dataclass(frozen=True)
class CacheTraceRow:
    block: int
    sink_blocks: int
    mid_blocks: int
    recent_blocks: int
    evicted_frames: int
    selected: int
    context_tokens: int
    context_bytes: int
    full_history_tokens: int
    attention_flops: int
    scoring_flops: int
    correction_flops: int
    frames_decoded: int


@dataclass
class GenerationResult:
    config_ini: str
    config_sha256: str
    policy: str
    seed: int
    backend: str
    latents: np.ndarray                 # (blocks * B_f, C, H, W)
    frames: np.ndarray | None           # (F, C_p, H_p, W_p) when collected
    cache_rows: list = field(default_factory=list)
    selection_trace: object = None
    counters: FlopCounters = field(default_factory=FlopCounters)

    def manifest(self) -> dict:
        return {
            "format": "streamkv-run-v1",
            "policy": self.policy,
            "seed": self.seed,
            "backend": self.backend,
            "config_sha256": self.config_sha256,
            "blocks": len(self.cache_rows),
            "latent_shape": list(self.latents.shape),
            "frame_shape": list(self.frames.shape) if self.frames is not None else None,
        }

    def write(self, out_dir, dump_latents: bool = True, dump_frames: bool = False):
        os.makedirs(out_dir, exist_ok=True)
        out = str(out_dir)
        manifest = self.manifest()
        with open(os.path.join(out, "config.ini"), "w") as fh:
            fh.write(self.config_ini)
        with open(os.path.join(out, "cache_trace.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CACHE_TRACE_COLUMNS)
            for r in self.cache_rows:
                writer.writerow([getattr(r, c) for c in CACHE_TRACE_COLUMNS])
        if self.selection_trace is not None:
            self.selection_trace.to_csv(os.path.join(out, "selection_trace.csv"))
        artifacts = ["config.ini", "cache_trace.csv"]
        if self.selection_trace is not None:
            artifacts.append("selection_trace.csv")
        if dump_latents:
            codec.write_raw(os.path.join(out, "latents.bin"), self.latents)
            artifacts.append("latents.bin")
        if dump_frames:
            if self.frames is None:
                raise ValueError("frames were not collected; rerun with collect_frames")
            codec.write_raw(os.path.join(out, "frames.bin"), self.frames)
            artifacts.append("frames.bin")
        manifest["artifacts"] = sorted(artifacts)
        with open(os.path.join(out, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return out


def generate(cfg, policy: str = "bounded", collect_frames: bool = False) -> GenerationResult:
    """Roll out ``cfg.run.blocks`` latent blocks under the given cache policy.

    ``bounded`` runs the partitioned cache with compression, routing and
    eviction; ``unbounded`` keeps every block's full-resolution KV and
    attends over all of it (the memory-hungry reference).  Both share the
    model, schedule and per-block noise streams, so outputs are directly
    comparable.
    """
    from streamkv import config as config_mod
    if policy not in ("bounded", "unbounded"):
        raise ValueError(f"policy must be 'bounded' or 'unbounded', got {policy!r}")

    model = config_mod.build_model(cfg)
    codec_spec = config_mod.build_codec_spec(cfg)
    schedule = sigma_schedule(cfg.schedule.steps, cfg.schedule.shift)
    n = model.tokens_per_block
    num_blocks = cfg.run.blocks
    counters = FlopCounters()

    cache_cfg: CacheConfig | None = None
    cache = None
    compressor = None
    router = None
    history: list[BlockKV] = []
    if policy == "bounded":
        cache_cfg = config_mod.build_cache_config(cfg)
        cache = PartitionedCache(cache_cfg)
        comp_spec = CompressorSpec(width=cfg.geometry.width, seed=cfg.codec.seed)
        compressor = Compressor(comp_spec, codec_spec, model.patch_in,
                                model.kv_weights(), model.rope, model.n_heads)
        router = Router(SelectionConfig(
            top_k=cfg.cache.top_k, gamma=cfg.selection.gamma,
            min_queries=cfg.selection.min_queries, half_heads=cfg.selection.half_heads,
            refresh_interval=cfg.selection.refresh_interval))

    decoder = codec.StreamingDecoder(codec_spec, initial=True)
    latents_out = []
    frames_out = [] if collect_frames else None
    rows: list[CacheTraceRow] = []
    frames_decoded_total = 0

    for i in range(num_blocks):
        try:
            rng = np.random.default_rng([cfg.run.seed, i])
            flops_before = counters.attention_flops
            scoring_before = router.scoring_flops if router else 0
            correction_before = cache.correction_flops if cache else 0
            context_lens: list[int] = []

            if policy == "bounded":
                def context_for(selected):
                    def ctx(layer, k_cur, v_cur):
                        keys, values = cache.assemble_context(selected, layer, (k_cur, v_cur))
                        if layer == 0:
                            context_lens.append(keys.shape[0])
                        return keys, values
                    return ctx

                def route_for(step, z, sigma):
                    queries = None
                    if step == 1:
                        queries = _routing_queries(model, cache, z, sigma, i)
                    return router.route(cache.mid, queries, step, i)
            else:
                def context_for(selected):
                    def ctx(layer, k_cur, v_cur):
                        keys = [b.keys[layer] for b in history] + [k_cur]
                        values = [b.values[layer] for b in history] + [v_cur]
                        k = np.concatenate(keys, axis=0)
                        if layer == 0:
                            context_lens.append(k.shape[0])
                        return k, np.concatenate(values, axis=0)
                    return ctx

                def route_for(step, z, sigma):
                    return []

            z_hat, selected = denoise_block(model, context_for, route_for,
                                            schedule, i, rng, counters)
            # sigma = 0 pass over the finished block fills the cache with
            # clean-context keys and queries
            _, kv_layers, q0 = model.forward(z_hat, 0.0, i,
                                             context_for(selected), counters)
            block_kv = BlockKV(i, [k for k, _ in kv_layers],
                               [v for _, v in kv_layers], q0=q0)

            pixels = decoder.decode_block(LatentBlock(i, z_hat))
            frames_decoded_total += pixels.shape[0]
            if frames_out is not None:
                frames_out.append(pixels)
            latents_out.append(z_hat)

            if policy == "bounded":
                backup = None
                if i >= cache_cfg.sink_blocks:
                    backup = compressor.make_entry(LatentBlock(i, z_hat), pixels=pixels)
                cache.append_block(block_kv, backup)
            else:
                history.append(block_kv)

            if not context_lens:
                raise RuntimeError("no context assembled")
            if len(set(context_lens)) != 1:
                raise RuntimeError(f"context length drifted within a block: "
                                   f"{sorted(set(context_lens))}")
            context_tokens = context_lens[0] + model.global_tokens

            if policy == "bounded":
                sink_b, mid_b, recent_b = cache.partition_sizes()
                evicted = cache.evicted_frames
                correction = cache.correction_flops - correction_before
                scoring = router.scoring_flops - scoring_before
                bytes_now = live_context_bytes(cache_cfg, context_tokens)
            else:
                sink_b, mid_b, recent_b = len(history), 0, 0
                evicted = 0
                correction = 0
                scoring = 0
                bytes_now = 2 * context_tokens * model.n_layers * model.n_heads * \
                    model.head_dim * 2 * 2
            rows.append(CacheTraceRow(
                block=i, sink_blocks=sink_b, mid_blocks=mid_b, recent_blocks=recent_b,
                evicted_frames=evicted, selected=len(selected),
                context_tokens=context_tokens, context_bytes=bytes_now,
                full_history_tokens=(i + 1) * n,
                attention_flops=counters.attention_flops - flops_before,
                scoring_flops=scoring, correction_flops=correction,
                frames_decoded=frames_decoded_total,
            ))
        except (ValueError, RuntimeError) as exc:
            if isinstance(exc, GenerationError):
                raise
            raise GenerationError(i, str(exc)) from exc

    ini = config_mod.to_ini_text(cfg)
    return GenerationResult(
        config_ini=ini,
        config_sha256=hashlib.sha256(ini.encode()).hexdigest(),
        policy=policy,
        seed=cfg.run.seed,
        backend=numerics.active_backend(),
        latents=np.concatenate(latents_out, axis=0) if latents_out
                else np.zeros((0,) + model.block_shape[1:]),
        frames=np.concatenate(frames_out, axis=0) if frames_out else None,
        cache_rows=rows,
        selection_trace=router.trace if router else None,
        counters=counters,
    )
