"""Experiment configuration and its JSON form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from typing import Any

from ..controller import FeedbackPolicy
from ..net import Adam, SGDMomentum
from ..render import HardBinInjector, RenderConfig
from ..scenegen import DEFAULT_BINS


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    sim_count: int = 2
    feedback_enabled: bool = False
    top_fraction: float = 0.1
    decay: float = 0.9
    target_sim_ids: tuple[int, ...] = (1,)
    samples_per_epoch: int = 2000
    validation_size: int = 200
    epochs: int = 15
    image_size: tuple[int, int] = (64, 64)
    channels: int = 32
    stages: int = 2
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    clip_norm: float | None = 0.1
    batch_size: int = 8
    bins: int = DEFAULT_BINS
    belief_sigma: float = 2.0
    distractors: tuple[int, int] = (0, 3)
    noise_stddev: float = 0.02
    background_mode: str = "mixed"
    # hard-bin scenario: extra distractors when joint `hard_joint` falls in `hard_bins`
    hard_joint: int = 0
    hard_bins: tuple[int, ...] = (0, 1)
    injector_distractors: int = 0
    miss_penalty: float | None = None
    error_threshold: float = 3.0
    transport: str = "inproc"
    sample_endpoint: str = ""
    control_endpoint: str = ""
    poll_timeout: float = 0.1

    def __post_init__(self):
        if self.sim_count < 1:
            raise ValueError("sim_count must be >= 1")
        if self.validation_size < 1:
            raise ValueError("validation_size must be >= 1")
        if self.samples_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("samples_per_epoch and batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not set(self.target_sim_ids) <= set(range(self.sim_count)):
            raise ValueError(f"feedback targets {self.target_sim_ids} are not simulator ids")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.transport not in ("inproc", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")
        self.policy  # validates q and gamma
        self.render_config  # validates render fields

    @property
    def policy(self) -> FeedbackPolicy:
        return FeedbackPolicy(self.top_fraction, self.decay, tuple(self.target_sim_ids))

    def make_optimizer(self) -> Adam | SGDMomentum:
        if self.optimizer == "sgd":
            return SGDMomentum(lr=self.lr, momentum=self.momentum, clip_norm=self.clip_norm)
        return Adam(lr=self.lr, beta1=self.momentum, clip_norm=self.clip_norm)

    @property
    def injector(self) -> HardBinInjector | None:
        if self.injector_distractors <= 0:
            return None
        return HardBinInjector(self.hard_joint, tuple(self.hard_bins), self.injector_distractors)

    @property
    def render_config(self) -> RenderConfig:
        base = RenderConfig().resized(*self.image_size)
        return replace(
            base,
            belief_sigma=self.belief_sigma * base.scale,
            distractor_count_range=tuple(self.distractors),
            noise_stddev=self.noise_stddev,
            background_mode=self.background_mode,
            injector=self.injector,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        clean = {}
        for k, v in data.items():
            clean[k] = tuple(v) if isinstance(v, list) else v
        return cls(**clean)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def hard_bin_scenario(**overrides) -> ExperimentConfig:
    """Reduced-scale setup where bins {0, 1} of joint 0 are made harder.

    A narrower model and shorter epochs keep ten paired runs near an hour
    on one CPU core.
    """
    base = dict(
        channels=16,
        samples_per_epoch=1000,
        validation_size=200,
        epochs=8,
        injector_distractors=8,
        miss_penalty=25.0,
        feedback_enabled=True,
    )
    base.update(overrides)
    return ExperimentConfig(**base)
