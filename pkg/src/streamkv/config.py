"""Run configuration: INI parsing, validation and component builders.

A config is six frozen sections mirroring the INI layout.  Parsing is
strict: unknown sections or keys fail loudly, and every validation error
names the offending ``section.key`` so CLI users can fix the file without
reading this module.  ``to_ini_text`` emits a canonical form whose sha256
identifies the run in the manifest.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, fields, replace

from streamkv.cache import CacheConfig
from streamkv.codec import CodecSpec, PATCH
from streamkv.compressor import compressed_grid
from streamkv.rope import RopeConfig, default_split

__all__ = [
    "GeometrySection", "CacheSection", "SelectionSection", "ScheduleSection",
    "CodecSection", "RunSection", "RunConfig", "default_config", "load_config",
    "to_ini_text", "config_sha256", "with_overrides", "build_model",
    "build_codec_spec", "build_cache_config", "reference_cache_config",
]


@dataclass(frozen=True)
class GeometrySection:
    frames_per_block: int = 4
    channels: int = 4
    latent_height: int = 12
    latent_width: int = 16
    width: int = 64
    heads: int = 4
    layers: int = 2
    rope_split: tuple | None = None
    global_tokens: int = 0
    seed: int = 0


@dataclass(frozen=True)
class CacheSection:
    sink_frames: int = 8
    recent_frames: int = 4
    top_k: int = 16
    mid_capacity: int = 64
    eviction_delta: int = 1


@dataclass(frozen=True)
class SelectionSection:
    gamma: float = 0.25
    min_queries: int = 32
    half_heads: bool = True
    refresh_interval: int = 1


@dataclass(frozen=True)
class ScheduleSection:
    steps: int = 4
    shift: float = 5.0


@dataclass(frozen=True)
class CodecSection:
    pixel_channels: int = 3
    temporal_stride: int = 4
    spatial_stride: int = 8
    seed: int = 0


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    blocks: int = 16
    out: str = "out"


_SECTIONS = {
    "geometry": GeometrySection,
    "cache": CacheSection,
    "selection": SelectionSection,
    "schedule": ScheduleSection,
    "codec": CodecSection,
    "run": RunSection,
}


def _require(cond: bool, path: str, message: str):
    if not cond:
        raise ValueError(f"{path}: {message}")


@dataclass(frozen=True)
class RunConfig:
    geometry: GeometrySection = GeometrySection()
    cache: CacheSection = CacheSection()
    selection: SelectionSection = SelectionSection()
    schedule: ScheduleSection = ScheduleSection()
    codec: CodecSection = CodecSection()
    run: RunSection = RunSection()

    def __post_init__(self):
        g, c = self.geometry, self.cache
        _require(g.frames_per_block >= 2, "geometry.frames_per_block",
                 f"must be >= 2 for the temporal conv, got {g.frames_per_block}")
        _require(g.channels >= 1, "geometry.channels", f"must be >= 1, got {g.channels}")
        _require(g.latent_height >= 8 and g.latent_height % 4 == 0,
                 "geometry.latent_height",
                 f"must be >= 8 and divisible by 4, got {g.latent_height}")
        _require(g.latent_width >= 8 and g.latent_width % 4 == 0,
                 "geometry.latent_width",
                 f"must be >= 8 and divisible by 4, got {g.latent_width}")
        _require(g.heads >= 1, "geometry.heads", f"must be >= 1, got {g.heads}")
        _require(g.width >= 1 and g.width % g.heads == 0, "geometry.width",
                 f"must be a positive multiple of heads ({g.heads}), got {g.width}")
        _require(g.layers >= 1, "geometry.layers", f"must be >= 1, got {g.layers}")
        _require(g.global_tokens >= 0, "geometry.global_tokens",
                 f"must be >= 0, got {g.global_tokens}")
        _require(c.sink_frames >= g.frames_per_block
                 and c.sink_frames % g.frames_per_block == 0,
                 "cache.sink_frames",
                 f"must be a positive multiple of frames_per_block "
                 f"({g.frames_per_block}), got {c.sink_frames}")
        _require(c.recent_frames >= g.frames_per_block
                 and c.recent_frames % g.frames_per_block == 0,
                 "cache.recent_frames",
                 f"must be a positive multiple of frames_per_block "
                 f"({g.frames_per_block}), got {c.recent_frames}")
        _require(c.top_k >= 1, "cache.top_k", f"must be >= 1, got {c.top_k}")
        _require(c.mid_capacity >= c.top_k, "cache.mid_capacity",
                 f"must be >= top_k ({c.top_k}), got {c.mid_capacity}")
        _require(c.eviction_delta >= 1, "cache.eviction_delta",
                 f"must be >= 1, got {c.eviction_delta}")
        s = self.selection
        _require(0.0 < s.gamma <= 1.0, "selection.gamma",
                 f"must be in (0, 1], got {s.gamma}")
        _require(s.min_queries >= 1, "selection.min_queries",
                 f"must be >= 1, got {s.min_queries}")
        _require(s.refresh_interval >= 1, "selection.refresh_interval",
                 f"must be >= 1, got {s.refresh_interval}")
        sch = self.schedule
        _require(sch.steps >= 1, "schedule.steps", f"must be >= 1, got {sch.steps}")
        _require(sch.shift > 0, "schedule.shift", f"must be positive, got {sch.shift}")
        cd = self.codec
        _require(cd.pixel_channels >= 1, "codec.pixel_channels",
                 f"must be >= 1, got {cd.pixel_channels}")
        _require(cd.temporal_stride >= 1, "codec.temporal_stride",
                 f"must be >= 1, got {cd.temporal_stride}")
        _require(cd.spatial_stride >= 4 and cd.spatial_stride % 4 == 0,
                 "codec.spatial_stride",
                 f"must be a multiple of 4 for the pooled re-encode, "
                 f"got {cd.spatial_stride}")
        _require(self.run.blocks >= 0, "run.blocks",
                 f"must be >= 0, got {self.run.blocks}")
        if g.rope_split is not None:
            head_dim = g.width // g.heads
            _require(len(g.rope_split) == 3 and sum(g.rope_split) == head_dim,
                     "geometry.rope_split",
                     f"must be three parts summing to head_dim ({head_dim}), "
                     f"got {g.rope_split}")

    @property
    def head_dim(self) -> int:
        return self.geometry.width // self.geometry.heads

    def rope_config(self) -> RopeConfig:
        split = self.geometry.rope_split
        if split is None:
            split = default_split(self.head_dim)
        return RopeConfig(self.head_dim, tuple(split))

    @property
    def tokens_per_block(self) -> int:
        g = self.geometry
        return g.frames_per_block * (g.latent_height // PATCH[1]) * \
            (g.latent_width // PATCH[2])

    @property
    def tokens_per_compressed(self) -> int:
        g = self.geometry
        t, h, w = compressed_grid(g.frames_per_block, g.latent_height, g.latent_width)
        return t * h * w


def default_config() -> RunConfig:
    return RunConfig()


_TUPLE_KEYS = {("geometry", "rope_split")}


def _parse_value(section: str, key: str, raw: str, target_type):
    path = f"{section}.{key}"
    try:
        if (section, key) in _TUPLE_KEYS:
            return tuple(int(part.strip()) for part in raw.split(","))
        if target_type is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read([str(path)])
    if not read:
        raise ValueError(f"cannot read config file {path}")
    if parser.defaults():
        raise ValueError("DEFAULT section is not supported")
    sections = {}
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ValueError(f"unknown config section {name!r}")
        cls = _SECTIONS[name]
        known = {f.name: f.type for f in fields(cls)}
        type_map = {f.name: type(getattr(cls(), f.name)) for f in fields(cls)
                    if getattr(cls(), f.name) is not None}
        kwargs = {}
        for key, raw in parser.items(name):
            if key not in known:
                raise ValueError(f"unknown config key {name}.{key}")
            target = type_map.get(key, str)
            kwargs[key] = _parse_value(name, key, raw, target)
        sections[name] = cls(**kwargs)
    return RunConfig(**sections)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def to_ini_text(cfg: RunConfig) -> str:
    """Canonical INI form; optional keys left at None are omitted."""
    buf = io.StringIO()
    for name, cls in _SECTIONS.items():
        section = getattr(cfg, name)
        buf.write(f"[{name}]\n")
        for f in fields(cls):
            value = getattr(section, f.name)
            if value is None:
                continue
            buf.write(f"{f.name} = {_format_value(value)}\n")
        buf.write("\n")
    return buf.getvalue()


def config_sha256(cfg: RunConfig) -> str:
    return hashlib.sha256(to_ini_text(cfg).encode()).hexdigest()


def with_overrides(cfg: RunConfig, **run_overrides) -> RunConfig:
    """New config with [run] fields replaced; ignores None values."""
    updates = {k: v for k, v in run_overrides.items() if v is not None}
    if not updates:
        return cfg
    return replace(cfg, run=replace(cfg.run, **updates))


def build_codec_spec(cfg: RunConfig) -> CodecSpec:
    g, cd = cfg.geometry, cfg.codec
    return CodecSpec(latent_channels=g.channels, pixel_channels=cd.pixel_channels,
                     temporal_stride=cd.temporal_stride, spatial_stride=cd.spatial_stride,
                     seed=cd.seed)


def build_model(cfg: RunConfig):
    from streamkv.generator import ToyModel
    g = cfg.geometry
    return ToyModel(frames_per_block=g.frames_per_block, channels=g.channels,
                    latent_height=g.latent_height, latent_width=g.latent_width,
                    width=g.width, n_heads=g.heads, layers=g.layers,
                    rope=cfg.rope_config(), global_tokens=g.global_tokens,
                    seed=g.seed)


def build_cache_config(cfg: RunConfig) -> CacheConfig:
    g, c = cfg.geometry, cfg.cache
    return CacheConfig(
        tokens_per_block=cfg.tokens_per_block,
        tokens_per_compressed=cfg.tokens_per_compressed,
        layers=g.layers, n_heads=g.heads, rope=cfg.rope_config(),
        frames_per_block=g.frames_per_block, sink_frames=c.sink_frames,
        recent_frames=c.recent_frames, top_k=c.top_k,
        mid_capacity=c.mid_capacity, eviction_delta=c.eviction_delta)


def reference_cache_config() -> CacheConfig:
    """Production-scale cache geometry used for memory projections.

    30 latent frames/s footage patchified to 6240 tokens per 4-frame block,
    30 layers of 12 heads at width 128, compressed blocks of 182 tokens.
    """
    return CacheConfig(
        tokens_per_block=6240, tokens_per_compressed=182, layers=30, n_heads=12,
        rope=RopeConfig(128, (44, 42, 42)), frames_per_block=4, sink_frames=8,
        recent_frames=4, top_k=16, mid_capacity=64, eviction_delta=1)
