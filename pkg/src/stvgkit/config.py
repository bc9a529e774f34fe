"""Run configuration: nested YAML sections with dotted ``section.key=value`` overrides."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

import yaml

from .grpo import GrpoConfig
from .simulator import NoiseConfig, WorldConfig


class ConfigError(ValueError):
    pass


@dataclass
class SimulatorSection:
    seed: int = 0
    height: int = 96
    width: int = 96
    duration: float = 30.0
    fps: float = 2.0
    n_objects: list = field(default_factory=lambda: [2, 5])
    categories: list = field(default_factory=lambda: ["person", "car", "dog"])
    size_range: list = field(default_factory=lambda: [10.0, 28.0])
    speed_range: list = field(default_factory=lambda: [0.2, 1.2])
    late_entry_prob: float = 0.5
    early_exit_prob: float = 0.2
    min_lifespan: int = 16
    sinusoidal_prob: float = 0.3
    layout: str = "free"
    visibility_threshold: float = 0.3
    n_episodes: int = 20
    subspan: bool = False
    miss_prob: float = 0.0
    jitter_sigma: float = 0.0
    false_positive_rate: float = 0.0
    category_confusion: float = 0.0
    fragmentation_p: float = 0.0

    def world_config(self) -> WorldConfig:
        noise = NoiseConfig(self.miss_prob, self.jitter_sigma, self.false_positive_rate,
                            self.category_confusion, self.fragmentation_p)
        return WorldConfig(
            seed=self.seed, height=self.height, width=self.width, duration=self.duration, fps=self.fps,
            n_objects=tuple(self.n_objects), categories=tuple(self.categories),
            size_range=tuple(self.size_range), speed_range=tuple(self.speed_range),
            late_entry_prob=self.late_entry_prob, early_exit_prob=self.early_exit_prob,
            min_lifespan=self.min_lifespan, sinusoidal_prob=self.sinusoidal_prob, layout=self.layout,
            visibility_threshold=self.visibility_threshold, noise=noise,
        )


@dataclass
class IdentitySection:
    redetect_every: int = 15  # 0 disables re-detection
    backward: bool = True
    iou_gate: float = 0.4
    overlap_gate: float = 0.6
    detector_confidence: float = 0.25


@dataclass
class PromptSection:
    theta: float = 1 / 3
    glyph_set: str = "numbers"
    font_size: float = 20
    color: list = field(default_factory=lambda: [255, 0, 0])
    pixel_budget: float = 1.6e6


@dataclass
class RewardsSection:
    variant: str = "decoupled"


@dataclass
class GrpoSection:
    n: int = 8
    clip_eps: float = 0.2
    beta: float = 0.04
    lr: float = 0.05
    updates: int = 2000
    seed: int = 0
    refresh_every: int = 1
    optimizer: str = "adam"
    temperature: float = 1.0
    corrupt_format_p: float = 0.0
    n_candidates: int = 5
    n_episodes: int = 16

    def grpo_config(self, variant: str) -> GrpoConfig:
        return GrpoConfig(n=self.n, clip_eps=self.clip_eps, beta=self.beta, lr=self.lr,
                          updates=self.updates, seed=self.seed, refresh_every=self.refresh_every,
                          optimizer=self.optimizer, temperature=self.temperature,
                          reward_variant=variant, corrupt_format_p=self.corrupt_format_p)


@dataclass
class EvaluationSection:
    repair: bool = False
    tolerance: Any = None  # boundary tolerance in pixels; None = 0.8% of the diagonal


@dataclass
class RunConfig:
    simulator: SimulatorSection = field(default_factory=SimulatorSection)
    identity: IdentitySection = field(default_factory=IdentitySection)
    prompt: PromptSection = field(default_factory=PromptSection)
    rewards: RewardsSection = field(default_factory=RewardsSection)
    grpo: GrpoSection = field(default_factory=GrpoSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def validate(self) -> "RunConfig":
        try:
            self.simulator.world_config().validate()
            self.grpo.grpo_config(self.rewards.variant).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        from .rewards import VARIANTS
        if self.rewards.variant not in VARIANTS:
            raise ConfigError(f"rewards.variant must be one of {VARIANTS}")
        if not 0 <= self.prompt.theta <= 1:
            raise ConfigError("prompt.theta must be in [0, 1]")
        return self


def _merge(obj, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where + key!r}")
        current = getattr(obj, key)
        if is_dataclass(current):
            updates[key] = _merge(current, value or {}, f"{where}{key}.")
        else:
            updates[key] = _coerce(current, value, where + key)
    return replace(obj, **updates)


def _coerce(current, value, name):
    if value is None or current is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true/false, got {value!r}")
        return value
    if isinstance(current, (int, float)) and not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    if isinstance(current, float):
        return float(value)
    if isinstance(current, int) and isinstance(value, float) and not value.is_integer():
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if isinstance(current, int):
        return int(value)
    return value


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        cfg = _merge(cfg, data, "")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        section, name = key.split(".", 1)
        cfg = _merge(cfg, {section: {name: yaml.safe_load(raw)}}, "")
    return cfg
