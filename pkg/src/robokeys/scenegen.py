"""Probabilistic scene model.

Per joint the generative chain is::

    d ~ Dirichlet(theta)        one draw per joint per scene
    k ~ Categorical(d)          angle bin
    q ~ Uniform(lo(k), hi(k))   joint angle inside the bin

Camera placement and augmentation state are drawn uniformly. Every
realization is recorded in the returned :class:`SceneSample` so that the
feedback controller can read the bins back later.

Randomness comes from NumPy's Philox4x64 counter-based generator. A stream
is addressed by integer words ``(seed, *stream)`` hashed through
``SeedSequence``; see :func:`make_rng`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kinematics import TWO_PI

DEFAULT_BINS = 8


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator for the stream addressed by ``(seed, *stream)``."""
    words = [int(seed)] + [int(s) for s in stream]
    if any(w < 0 for w in words):
        raise ValueError("stream words must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


@dataclass
class DirichletState:
    joint_index: int
    concentration: np.ndarray

    def __post_init__(self):
        self.concentration = np.array(self.concentration, dtype=np.float64)
        if self.concentration.ndim != 1 or self.concentration.size < 1:
            raise ValueError("concentration must be a non-empty vector")
        if not np.all(np.isfinite(self.concentration)) or np.any(self.concentration <= 0):
            raise ValueError("concentration values must be positive and finite")
        if self.joint_index < 0:
            raise ValueError("joint_index must be non-negative")

    @classmethod
    def uniform(cls, joint_index: int, bin_count: int = DEFAULT_BINS) -> "DirichletState":
        return cls(joint_index, np.ones(bin_count))

    @property
    def bin_count(self) -> int:
        return self.concentration.size

    def mean(self) -> np.ndarray:
        return self.concentration / self.concentration.sum()

    def copy(self) -> "DirichletState":
        return DirichletState(self.joint_index, self.concentration.copy())


def uniform_states(joint_count: int, bin_count: int = DEFAULT_BINS) -> list[DirichletState]:
    return [DirichletState.uniform(j, bin_count) for j in range(joint_count)]


def bin_limits(k: int, K: int) -> tuple[float, float]:
    if K < 1:
        raise ValueError("bin count must be >= 1")
    if not 0 <= k < K:
        raise ValueError(f"bin {k} out of range for K={K}")
    return TWO_PI * k / K, TWO_PI * (k + 1) / K


def sample_bin_probs(state: DirichletState, rng: np.random.Generator) -> np.ndarray:
    d = rng.dirichlet(state.concentration)
    return d / d.sum()


def sample_bin(d: Sequence[float], rng: np.random.Generator) -> int:
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 1 or d.size == 0 or np.any(d < 0) or abs(d.sum() - 1.0) > 1e-6:
        raise ValueError("bin probabilities must lie on the simplex")
    cdf = np.cumsum(d)
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(k, d.size - 1)


def sample_angle(k: int, K: int, rng: np.random.Generator) -> float:
    lo, hi = bin_limits(k, K)
    value = lo + rng.random() * (hi - lo)
    # rounding can land exactly on the open upper limit
    return value if value < hi else float(np.nextafter(hi, lo))


@dataclass(frozen=True)
class CameraRanges:
    azimuth: tuple[float, float] = (0.0, TWO_PI)
    elevation: tuple[float, float] = (np.pi / 12, 5 * np.pi / 12)
    distance: tuple[float, float] = (4.0, 8.0)


@dataclass
class SceneSample:
    bins: np.ndarray
    angles: np.ndarray
    bin_probs: np.ndarray
    camera_azimuth: float
    camera_elevation: float
    camera_distance: float
    augmentation_seed: int
    sample_id: int = 0
    sim_id: int = 0
    bin_count: int = field(default=DEFAULT_BINS)

    @property
    def joint_count(self) -> int:
        return len(self.bins)

    def __eq__(self, other):
        if not isinstance(other, SceneSample):
            return NotImplemented
        return (
            np.array_equal(self.bins, other.bins)
            and np.array_equal(self.angles, other.angles)
            and np.array_equal(self.bin_probs, other.bin_probs)
            and (self.camera_azimuth, self.camera_elevation, self.camera_distance)
            == (other.camera_azimuth, other.camera_elevation, other.camera_distance)
            and (self.augmentation_seed, self.sample_id, self.sim_id, self.bin_count)
            == (other.augmentation_seed, other.sample_id, other.sim_id, other.bin_count)
        )


def sample_scene(
    states: Sequence[DirichletState],
    camera_ranges: CameraRanges,
    rng: np.random.Generator,
    sample_id: int = 0,
    sim_id: int = 0,
) -> SceneSample:
    if not states:
        raise ValueError("need at least one joint state")
    K = states[0].bin_count
    if any(s.bin_count != K for s in states):
        raise ValueError("all joints must share the same bin count")
    J = len(states)
    bins = np.empty(J, dtype=np.int64)
    angles = np.empty(J)
    probs = np.empty((J, K))
    for j, state in enumerate(states):
        probs[j] = sample_bin_probs(state, rng)
        bins[j] = sample_bin(probs[j], rng)
        angles[j] = sample_angle(int(bins[j]), K, rng)
    az = rng.uniform(*camera_ranges.azimuth)
    el = rng.uniform(*camera_ranges.elevation)
    dist = rng.uniform(*camera_ranges.distance)
    aug = int(rng.integers(0, 2**63, dtype=np.int64))
    return SceneSample(
        bins=bins,
        angles=angles,
        bin_probs=probs,
        camera_azimuth=float(az),
        camera_elevation=float(el),
        camera_distance=float(dist),
        augmentation_seed=aug,
        sample_id=int(sample_id),
        sim_id=int(sim_id),
        bin_count=K,
    )
