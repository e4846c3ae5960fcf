"""Run configuration in a flat ``section.key = value`` text format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from typing import Any

from ..corpus import CorpusManifest


class ConfigError(ValueError):
    pass


@dataclass
class RvqConfig:
    layers: int = 6  # V + 1
    codebook_size: int = 128
    code_dim: int = 128
    dropout_q: float = 0.2
    beta: float = 0.25
    ema_decay: float = 0.99
    reset_threshold: float = 1.0


@dataclass
class CodecConfig:
    width: int = 64
    res_blocks: int = 2
    steps: int = 3000
    batch_size: int = 32
    window: int = 32
    lr: float = 1e-3
    warmup: int = 200
    decay_at: float = 0.75  # fraction of steps after which lr drops by decay_gamma; 0 disables
    decay_gamma: float = 0.1


@dataclass
class TransformerConfig:
    hidden: int = 128
    layers: int = 4
    heads: int = 4
    ff_mult: int = 4
    max_len: int = 64
    cond_drop: float = 0.1
    steps: int = 3000
    batch_size: int = 64
    lr: float = 2e-4
    warmup: int = 2000


@dataclass
class EngineConfig:
    iterations: int = 10
    s_masked: float = 4.0
    s_residual: float = 5.0
    temperature: float = 1.0
    gumbel_anneal: bool = False
    residual_mode: str = "greedy"


@dataclass
class OracleConfig:
    width: int = 32
    steps: int = 400
    batch_size: int = 64
    lr: float = 3e-3


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusManifest = field(default_factory=CorpusManifest)
    rvq: RvqConfig = field(default_factory=RvqConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    mformer: TransformerConfig = field(default_factory=TransformerConfig)
    rformer: TransformerConfig = field(default_factory=TransformerConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)

    def validate(self) -> "RunConfig":
        try:
            self.corpus.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        _bound("seed", self.seed, 0, 2**64 - 1)
        _bound("rvq.layers", self.rvq.layers, 1, 64)
        _bound("rvq.codebook_size", self.rvq.codebook_size, 2, 1 << 20)
        _bound("rvq.code_dim", self.rvq.code_dim, 1, 1 << 16)
        _bound("rvq.dropout_q", self.rvq.dropout_q, 0.0, 1.0)
        _bound("rvq.beta", self.rvq.beta, 0.0, 1e6)
        _bound("rvq.ema_decay", self.rvq.ema_decay, 1e-9, 1 - 1e-9)
        _bound("rvq.reset_threshold", self.rvq.reset_threshold, 0.0, 1e9)
        _bound("codec.decay_at", self.codec.decay_at, 0.0, 1.0)
        _bound("codec.decay_gamma", self.codec.decay_gamma, 0.0, 1.0)
        _bound("codec.window", self.codec.window, 4, 4096)
        if self.codec.window % 4:
            raise ConfigError("codec.window must be a multiple of 4")
        for name in ("mformer", "rformer"):
            t = getattr(self, name)
            _bound(f"{name}.hidden", t.hidden, 1, 1 << 16)
            _bound(f"{name}.heads", t.heads, 1, 1024)
            if t.hidden % t.heads:
                raise ConfigError(f"{name}.hidden must be divisible by {name}.heads")
            _bound(f"{name}.cond_drop", t.cond_drop, 0.0, 1.0)
            _bound(f"{name}.max_len", t.max_len, 1, 4096)
        _bound("engine.iterations", self.engine.iterations, 1, 10000)
        _bound("engine.s_masked", self.engine.s_masked, 0.0, 1e6)
        _bound("engine.s_residual", self.engine.s_residual, 0.0, 1e6)
        if self.engine.temperature <= 0:
            raise ConfigError("engine.temperature must be positive")
        if self.engine.residual_mode not in ("greedy", "sample"):
            raise ConfigError("engine.residual_mode must be greedy or sample")
        return self

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}"]
        for section in ("corpus", "rvq", "codec", "mformer", "rformer", "engine", "oracle"):
            obj = getattr(self, section)
            for f in fields(obj):
                lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def with_overrides(self, values: dict[str, Any]) -> "RunConfig":
        cfg = dataclasses.replace(self)
        for sec in ("corpus", "rvq", "codec", "mformer", "rformer", "engine", "oracle"):
            setattr(cfg, sec, dataclasses.replace(getattr(self, sec)))
        for key, raw in values.items():
            _assign(cfg, key, raw)
        return cfg


def _bound(name: str, value, lo, hi) -> None:
    if not lo <= value <= hi:
        raise ConfigError(f"{name} = {value} outside [{lo}, {hi}]")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _scalar(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t


def parse_flat(text: str) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment, commas make lists."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = [_scalar(v) for v in value.split(",")] if "," in value else _scalar(value)
    return out


def _assign(cfg: RunConfig, key: str, raw) -> None:
    if key == "seed":
        cfg.seed = int(raw)
        return
    if "." not in key:
        raise ConfigError(f"unknown config key {key!r}")
    section, name = key.split(".", 1)
    obj = getattr(cfg, section, None)
    if obj is None or not dataclasses.is_dataclass(obj):
        raise ConfigError(f"unknown config section {section!r}")
    ftypes = {f.name: f for f in fields(obj)}
    if name not in ftypes:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(obj, name)
    try:
        if isinstance(current, bool):
            value = raw if isinstance(raw, bool) else str(raw).lower() in ("true", "1", "yes", "on")
        elif isinstance(current, tuple):
            items = raw if isinstance(raw, list) else [raw]
            kind = type(current[0]) if current else str
            value = tuple(kind(x) for x in items)
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        else:
            value = str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    setattr(obj, name, value)


def load_config(text: str | None = None, overrides: dict[str, Any] | None = None, preset: str | None = None) -> RunConfig:
    cfg = PRESETS[preset or "desk"]()
    values = parse_flat(text) if text else {}
    if "preset" in values:
        cfg = PRESETS[str(values.pop("preset"))]()
    values.update(overrides or {})
    return cfg.with_overrides(values).validate()


def desk_preset() -> RunConfig:
    return RunConfig()


def full_preset() -> RunConfig:
    """Layer counts and sizes of the full-scale model."""
    cfg = RunConfig()
    cfg.rvq = RvqConfig(layers=6, codebook_size=512, code_dim=512, dropout_q=0.2)
    for name in ("mformer", "rformer"):
        setattr(cfg, name, TransformerConfig(hidden=384, layers=6, heads=6, lr=2e-4, warmup=2000))
    cfg.engine = EngineConfig(iterations=10, s_masked=4.0, s_residual=5.0)
    return cfg


def toy_preset() -> RunConfig:
    """Small, fast settings used by the test-suite."""
    cfg = RunConfig()
    cfg.corpus = CorpusManifest(n_samples=800)
    cfg.rvq = RvqConfig(layers=6, codebook_size=32, code_dim=64)
    cfg.codec = CodecConfig(width=64, steps=4000, batch_size=32, window=32, lr=1e-3, warmup=100)
    for name in ("mformer", "rformer"):
        setattr(cfg, name, TransformerConfig(hidden=64, layers=2, heads=4, steps=1500, batch_size=32, lr=1e-3, warmup=100))
    cfg.oracle = OracleConfig(steps=300)
    return cfg


PRESETS = {"desk": desk_preset, "full": full_preset, "toy": toy_preset}
