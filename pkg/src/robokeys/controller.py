"""Feedback controller: steer simulator priors toward high-loss bins.

Because every validation sample carries its hidden bin assignments, the
posterior over a joint's bin distribution only depends on the bins of the
selected samples. Dirichlet-Categorical conjugacy turns the update into
count addition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .scenegen import DirichletState


@dataclass(frozen=True)
class ValidationResult:
    sample_id: int
    loss: float
    bins: tuple[int, ...]


@dataclass(frozen=True)
class SelectionSet:
    entries: tuple[ValidationResult, ...]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("selection set must not be empty")
        for e in self.entries:
            if not math.isfinite(e.loss) or e.loss < 0:
                raise ValueError(f"invalid loss {e.loss} for sample {e.sample_id}")

    @property
    def sample_ids(self) -> list[int]:
        return [e.sample_id for e in self.entries]

    def bin_counts(self, joint: int, bin_count: int) -> np.ndarray:
        counts = np.zeros(bin_count, dtype=np.int64)
        for e in self.entries:
            counts[e.bins[joint]] += 1
        return counts


@dataclass(frozen=True)
class FeedbackPolicy:
    top_fraction: float = 0.1
    decay: float = 0.9
    target_sim_ids: tuple[int, ...] = (1,)

    def __post_init__(self):
        if not 0 < self.top_fraction <= 1:
            raise ValueError("top_fraction must lie in (0, 1]")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")


@dataclass(frozen=True)
class PriorUpdate:
    """Replacement concentration vector for one joint of one simulator."""

    target_sim_id: int
    joint_index: int
    theta: np.ndarray = field(compare=False)

    def __eq__(self, other):
        if not isinstance(other, PriorUpdate):
            return NotImplemented
        return (
            self.target_sim_id == other.target_sim_id
            and self.joint_index == other.joint_index
            and np.array_equal(self.theta, other.theta)
        )

    @property
    def bin_count(self) -> int:
        return len(self.theta)


def _as_results(items: Iterable) -> list[ValidationResult]:
    out = []
    for it in items:
        if isinstance(it, ValidationResult):
            out.append(it)
        else:
            sid, loss, bins = it
            out.append(ValidationResult(int(sid), float(loss), tuple(int(b) for b in bins)))
    return out


def select_hard_samples(validation_losses: Iterable, q: float) -> SelectionSet:
    """Top ``ceil(q * n)`` samples by loss; ties go to the smaller sample id."""
    results = _as_results(validation_losses)
    if not results:
        raise ValueError("no validation results to select from")
    if not 0 < q <= 1:
        raise ValueError("q must lie in (0, 1]")
    k = math.ceil(q * len(results))
    ranked = sorted(results, key=lambda r: (-r.loss, r.sample_id))
    return SelectionSet(tuple(ranked[:k]))


def posterior_update(state: DirichletState, bin_counts: Sequence[int], gamma: float = 1.0) -> DirichletState:
    """Decay toward the flat prior, then add the observed counts.

    ``theta' = 1 + gamma * (theta - 1) + counts``; with ``gamma == 1`` this is
    the exact conjugate posterior.
    """
    counts = np.asarray(bin_counts)
    if counts.shape != (state.bin_count,):
        raise ValueError(f"expected {state.bin_count} counts, got shape {counts.shape}")
    if np.any(counts < 0):
        raise ValueError("bin counts must be non-negative")
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    # gamma * theta + (1 - gamma) is exact for gamma == 1
    theta = gamma * state.concentration + (1.0 - gamma) + counts
    return DirichletState(state.joint_index, theta)


def feedback_step(
    validation_results: Iterable,
    policy: FeedbackPolicy,
    states: Sequence[DirichletState],
) -> tuple[list[PriorUpdate], list[DirichletState]]:
    """One controller round.

    Returns the PRIOR_UPDATE messages (one per target simulator and joint)
    together with the updated per-joint states.
    """
    selection = select_hard_samples(validation_results, policy.top_fraction)
    new_states = []
    for state in states:
        counts = selection.bin_counts(state.joint_index, state.bin_count)
        new_states.append(posterior_update(state, counts, policy.decay))
    updates = [
        PriorUpdate(sim_id, s.joint_index, s.concentration.copy())
        for sim_id in policy.target_sim_ids
        for s in new_states
    ]
    return updates, new_states


class Controller:
    """Owns the Dirichlet states of the feedback-target simulators."""

    def __init__(self, policy: FeedbackPolicy, states: Sequence[DirichletState]):
        self.policy = policy
        self.states = [s.copy() for s in states]
        self.history: list[list[np.ndarray]] = [[s.concentration.copy() for s in self.states]]

    def step(self, validation_results: Iterable) -> list[PriorUpdate]:
        updates, self.states = feedback_step(validation_results, self.policy, self.states)
        self.history.append([s.concentration.copy() for s in self.states])
        return updates
