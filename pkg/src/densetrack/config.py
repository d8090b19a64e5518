"""Pipeline configuration: JSON file, flag overrides, validation."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .adapt import AdaptConfig
from .correspond import BottleneckConfig, EncoderConfig, TrainConfig
from .errors import ConfigError
from .memory import MemoryConfig

DEVICE_ENV = "DENSETRACK_DEVICE"
POLICIES = ("first_plus_recent", "full_history", "previous_only")


@dataclass
class SimulateSection:
    kind: str = "random"  # random | translation | occlusion
    count: int = 100
    frame_size: int = 128
    length: int = 30
    sequences_per_image: int = 1


@dataclass
class EncoderSection:
    widths: list[int] = field(default_factory=lambda: [64, 128, 256])
    blocks: list[int] = field(default_factory=lambda: [2, 2, 2])
    strides: list[int] = field(default_factory=lambda: [2, 2, 1])


@dataclass
class PairwiseSection:
    iterations: int = 120_000
    batch_size: int = 48
    lr: float = 1e-3
    crop: int = 384
    max_gap: int = 4
    log_every: int = 100


@dataclass
class MemorySection:
    iterations: int = 10_000
    batch_size: int = 4
    lr: float = 1e-4
    momentum: float = 0.999
    crop: int = 384
    log_every: int = 100


@dataclass
class TrackSection:
    k: int = 5
    window: int = 25
    policy: str = "first_plus_recent"
    short_side: int | None = 480


@dataclass
class AdaptSection:
    enabled: bool = False
    iterations: int = 200
    lr: float = 2e-4
    lr_step: int = 50
    lr_gamma: float = 0.5
    resolution: int = 480
    batch_size: int = 4
    decay: float = 0.98
    w_ce: float = 1.0
    w_dice: float = 1.0
    widths: list[int] = field(default_factory=lambda: [64, 128, 256])
    curve_every: int = 10
    # optional synthetic error injected into the propagated masks:
    # {"center": [y, x], "radius": r, "start": frame}
    drift: dict | None = None


@dataclass
class BottleneckSection:
    jitter_prob: float = 0.3
    dropout_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1


@dataclass
class PipelineConfig:
    seed: int = 0
    jobs: int = 1
    device: str = "cpu"
    simulate: SimulateSection = field(default_factory=SimulateSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    bottleneck: BottleneckSection = field(default_factory=BottleneckSection)
    pairwise: PairwiseSection = field(default_factory=PairwiseSection)
    memory: MemorySection = field(default_factory=MemorySection)
    track: TrackSection = field(default_factory=TrackSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)

    # ------------------------------------------------------------ building

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        cfg = _build(cls, data, "")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> "PipelineConfig":
        data: dict = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file {path} does not exist") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path}: {exc}") from None
        if os.environ.get(DEVICE_ENV):
            data["device"] = os.environ[DEVICE_ENV]
        for dotted, value in (overrides or {}).items():
            if value is None:
                continue
            node = data
            *head, last = dotted.split(".")
            for part in head:
                node = node.setdefault(part, {})
            node[last] = value
        return cls.from_dict(data)

    @classmethod
    def desk(cls, **overrides) -> "PipelineConfig":
        """Small settings that train and track in minutes on one CPU core."""
        data = {
            "simulate": {"count": 10, "frame_size": 64, "length": 30},
            "encoder": {"widths": [32, 64, 128]},
            "pairwise": {"iterations": 500, "batch_size": 4, "crop": 64, "log_every": 50},
            "memory": {"iterations": 100, "batch_size": 2, "crop": 64, "log_every": 25},
            "track": {"short_side": None},
            "adapt": {"resolution": 128, "widths": [16, 32, 64]},
        }
        for k, v in overrides.items():
            data.setdefault(k, {}).update(v) if isinstance(v, dict) else data.__setitem__(k, v)
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, out_dir: str | Path) -> Path:
        """Freeze the exact configuration next to the artifacts it produced."""
        path = Path(out_dir) / "config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path

    # ----------------------------------------------------------- validation

    def validate(self) -> None:
        def need(cond: bool, path: str, msg: str) -> None:
            if not cond:
                raise ConfigError(f"{path}: {msg}")

        need(self.jobs >= 1, "jobs", "must be >= 1")
        need(self.device == "cpu", "device", f"{self.device!r} is not available (only 'cpu' is supported)")
        need(self.simulate.kind in ("random", "translation", "occlusion"), "simulate.kind", "unknown corpus kind")
        need(self.simulate.count >= 1, "simulate.count", "must be >= 1")
        need(self.simulate.length >= 2, "simulate.length", "must be >= 2")
        need(self.simulate.frame_size % 4 == 0, "simulate.frame_size", "must be divisible by 4")
        need(self.track.window % 2 == 1 and self.track.window > 0, "track.window", "must be odd and positive")
        need(self.track.k >= 1, "track.k", "must be >= 1")
        need(self.track.policy in POLICIES, "track.policy", f"must be one of {POLICIES}")
        need(self.track.short_side is None or self.track.short_side >= 8, "track.short_side", "must be >= 8")
        need(0.0 <= self.memory.momentum < 1.0, "memory.momentum", "must lie in [0, 1)")
        for name in ("pairwise", "memory"):
            sec = getattr(self, name)
            need(sec.iterations >= 0, f"{name}.iterations", "must be >= 0")
            need(sec.batch_size >= 1, f"{name}.batch_size", "must be >= 1")
            need(sec.lr > 0, f"{name}.lr", "must be > 0")
            need(sec.crop % 4 == 0 and sec.crop >= 8, f"{name}.crop", "must be a multiple of 4, at least 8")
        need(self.pairwise.max_gap >= 1, "pairwise.max_gap", "must be >= 1")
        need(self.adapt.iterations >= 0, "adapt.iterations", "must be >= 0")
        need(self.adapt.resolution % 4 == 0, "adapt.resolution", "must be divisible by 4")
        need(0 < self.adapt.decay <= 1, "adapt.decay", "must lie in (0, 1]")
        need(self.adapt.w_ce >= 0 and self.adapt.w_dice >= 0 and self.adapt.w_ce + self.adapt.w_dice > 0,
             "adapt.w_ce/w_dice", "must be >= 0 with at least one positive")
        if self.adapt.drift is not None:
            d = self.adapt.drift
            need(isinstance(d, dict) and set(d) <= {"center", "radius", "start"} and {"center", "radius"} <= set(d),
                 "adapt.drift", "expects center [y, x], radius and optional start")
            need(len(d["center"]) == 2 and d["radius"] >= 0 and d.get("start", 5) >= 1, "adapt.drift",
                 "center must be [y, x], radius >= 0 and start >= 1")
        for name in ("jitter_prob", "dropout_prob"):
            v = getattr(self.bottleneck, name)
            need(0 <= v <= 1, f"bottleneck.{name}", "must lie in [0, 1]")
        try:
            self.encoder_config()
        except ConfigError as exc:
            raise ConfigError(f"encoder: {exc}") from None

    # ------------------------------------------------------ module configs

    def encoder_config(self) -> EncoderConfig:
        e = self.encoder
        return EncoderConfig(tuple(e.widths), tuple(e.blocks), tuple(e.strides))

    def bottleneck_config(self) -> BottleneckConfig:
        return BottleneckConfig(**asdict(self.bottleneck))

    def train_config(self) -> TrainConfig:
        p = self.pairwise
        return TrainConfig(
            iterations=p.iterations, batch_size=p.batch_size, lr=p.lr, crop=p.crop, window_side=self.track.window,
            max_gap=p.max_gap, log_every=p.log_every, seed=self.seed, encoder=self.encoder_config(),
            bottleneck=self.bottleneck_config(),
        )

    def memory_config(self) -> MemoryConfig:
        m = self.memory
        return MemoryConfig(
            iterations=m.iterations, batch_size=m.batch_size, lr=m.lr, momentum=m.momentum, num_refs=self.track.k,
            crop=m.crop, window_side=self.track.window, log_every=m.log_every, seed=self.seed,
            bottleneck=self.bottleneck_config(),
        )

    def adapt_config(self) -> AdaptConfig:
        a = self.adapt
        return AdaptConfig(
            iterations=a.iterations, lr=a.lr, lr_step=a.lr_step, lr_gamma=a.lr_gamma, resolution=a.resolution,
            batch_size=a.batch_size, decay=a.decay, w_ce=a.w_ce, w_dice=a.w_dice, widths=tuple(a.widths),
            seed=self.seed, curve_every=a.curve_every,
        )


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown field")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        sub = getattr(defaults, name)
        where = f"{path}.{name}" if path else name
        if is_dataclass(sub):
            kwargs[name] = _build(type(sub), value, where)
        else:
            kwargs[name] = _coerce(value, sub, where)
    return cls(**kwargs)


def _coerce(value, default, where: str):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string")
    return value
