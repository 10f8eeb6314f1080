"""The adaptive training loop: simulators -> interleaver -> trainer -> controller."""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..controller import Controller, ValidationResult
from ..kinematics import default_robot
from ..metrics import Evaluation, aggregate, evaluate, nms_peaks
from ..net import ModelParams, backward_and_step, init_params, predict, sample_losses
from ..render import in_frame, project_keypoints
from ..scenegen import uniform_states
from ..transport import (
    SAMPLE,
    STATS,
    Interleaver,
    Publisher,
    SampleMessage,
    Stats,
    Subscriber,
    SubscriberDemux,
)
from .config import ExperimentConfig
from .simulator import CooperativeStream, Simulator, SimulatorEndpoint

log = logging.getLogger(__name__)

_run_counter = itertools.count()


class AccountingError(RuntimeError):
    """STATS totals disagree with what the trainer consumed."""


@dataclass
class Timing:
    mean_ms: float
    std_ms: float
    count: int

    @classmethod
    def of(cls, seconds) -> "Timing":
        ms = np.asarray(seconds, dtype=np.float64) * 1e3
        if ms.size == 0:
            return cls(0.0, 0.0, 0)
        return cls(float(ms.mean()), float(ms.std()), int(ms.size))


@dataclass
class RunReport:
    config: ExperimentConfig
    errors: list[float] = field(default_factory=list)  # % of diagonal, per epoch
    miss_rates: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)  # mean training loss per epoch
    validation_losses: list[float] = field(default_factory=list)
    sim_step: Timing = field(default_factory=lambda: Timing(0.0, 0.0, 0))
    train_step: Timing = field(default_factory=lambda: Timing(0.0, 0.0, 0))
    initial_theta: dict[int, list[list[float]]] = field(default_factory=dict)
    final_theta: dict[int, list[list[float]]] = field(default_factory=dict)
    consumed: int = 0  # training plus validation samples
    validated: int = 0
    stats_published: int = 0
    params: ModelParams | None = field(default=None, repr=False)

    @property
    def epochs_to_threshold(self) -> int | None:
        return epochs_to_reach(self.errors, self.config.error_threshold)

    def deterministic_part(self) -> dict:
        """The report without wall-clock timings or weights."""
        return {
            "errors": self.errors,
            "miss_rates": self.miss_rates,
            "losses": self.losses,
            "validation_losses": self.validation_losses,
            "initial_theta": self.initial_theta,
            "final_theta": self.final_theta,
            "consumed": self.consumed,
            "validated": self.validated,
        }


def epochs_to_reach(errors, threshold: float) -> int | None:
    """1-based count of epochs until the error first drops to ``threshold``."""
    for i, e in enumerate(errors):
        if not math.isnan(e) and e <= threshold:
            return i + 1
    return None


def _stack(msgs: list[SampleMessage]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([m.image for m in msgs]), np.stack([m.beliefs for m in msgs])


def _theta(states) -> list[list[float]]:
    return [s.concentration.tolist() for s in states]


def validate(params: ModelParams, samples: list[SampleMessage], config: ExperimentConfig, model=None):
    """Per-sample losses and localization evaluations on ``samples``."""
    model = model or default_robot()
    cfg = config.render_config
    w, h = cfg.image_size
    images, targets = _stack(samples)
    outs = predict(params, images)
    losses = sample_losses(outs, targets)
    evals: list[Evaluation] = []
    for msg, pred in zip(samples, outs[-1]):
        uv, depth = project_keypoints(msg.scene(), model, cfg)
        visible = in_frame(uv, depth, cfg.image_size)
        gt = [tuple(p) if ok else None for p, ok in zip(uv, visible)]
        evals.append(evaluate(nms_peaks(pred), gt, w, h, config.miss_penalty))
    return losses, evals


class _Run:
    """Wiring for one training run over the in-process transport."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        tag = f"run{next(_run_counter)}-{id(self):x}"
        self.sample_ep = config.sample_endpoint or f"inproc://{tag}/samples"
        self.control_ep = config.control_endpoint or f"inproc://{tag}/control"
        self.subscriber = Subscriber(self.sample_ep, types=[SAMPLE, STATS], queue_size=1 << 20)
        rc = config.render_config
        self.sims = [Simulator(i, config.seed, rc, bins=config.bins) for i in range(config.sim_count)]
        self.endpoints = [SimulatorEndpoint(s, self.sample_ep, self.control_ep) for s in self.sims]
        self.control = Publisher(self.control_ep)
        self.demux = SubscriberDemux(self.subscriber, range(config.sim_count))
        self.streams = [CooperativeStream(ep, self.demux.stream(ep.sim.sim_id)) for ep in self.endpoints]

    def validation_samples(self, epoch: int) -> list[SampleMessage]:
        # drawn by the first non-target simulator; with every simulator a
        # feedback target the first one still uses uniform validation priors
        targets = set(self.config.target_sim_ids) if self.config.feedback_enabled else set()
        source = next((ep for ep in self.endpoints if ep.sim.sim_id not in targets), self.endpoints[0])
        stream = self.demux.stream(source.sim.sim_id)
        out = []
        for i in range(self.config.validation_size):
            source.publish_validation(epoch, i, self.config.validation_size)
            out.append(stream.poll(self.config.poll_timeout))
        return out

    def collect_stats(self) -> int:
        for ep in self.endpoints:
            ep.publish_stats()
        latest: dict[int, int] = {}
        while len(latest) < len(self.endpoints):
            msg = self.subscriber.next(timeout=1.0)
            if isinstance(msg, Stats):
                latest[msg.source_id] = msg.published
            else:  # pragma: no cover - cooperative mode leaves nothing queued
                self.demux.other.append(msg)
        return sum(latest.values())

    def close(self):
        for ep in self.endpoints:
            ep.close()
        self.control.close()
        self.subscriber.close()


def _fresh_params(config: ExperimentConfig, params: ModelParams | None) -> ModelParams:
    if params is not None:
        return params.copy()
    return init_params(
        joints=default_robot().joint_count, channels=config.channels, stages=config.stages, seed=config.seed
    )


def train_epochs(
    config: ExperimentConfig,
    params: ModelParams,
    interleaver: Interleaver,
    validation_samples: Callable[[int], list[SampleMessage]],
    publish_update: Callable[[object], None],
    report: RunReport,
) -> Controller:
    """The epoch loop shared by the in-process and socket modes.

    Each epoch trains on ``samples_per_epoch`` interleaved samples, validates
    on a fresh set, and (with feedback on) sends PRIOR_UPDATE messages
    derived from the validation losses.
    """
    optimizer = config.make_optimizer()
    controller = Controller(config.policy, uniform_states(default_robot().joint_count, config.bins))
    train_seconds: list[float] = []
    for epoch in range(config.epochs):
        epoch_losses = []
        remaining = config.samples_per_epoch
        while remaining > 0:
            interleaver.batch_size = min(config.batch_size, remaining)
            batch = interleaver.next_batch()
            remaining -= len(batch)
            t0 = time.perf_counter()
            _, per_sample = backward_and_step(_stack(batch), params, optimizer)
            train_seconds.append(time.perf_counter() - t0)
            epoch_losses.append(per_sample)
        val = validation_samples(epoch)
        losses, evals = validate(params, val, config)
        mean, miss = aggregate(evals, config.miss_penalty)
        report.losses.append(float(np.concatenate(epoch_losses).mean()))
        report.validation_losses.append(float(np.mean(losses)))
        report.errors.append(mean)
        report.miss_rates.append(miss)
        if config.feedback_enabled:
            t0 = time.perf_counter()
            results = [
                ValidationResult(m.sample_id, float(l), tuple(int(b) for b in m.bins)) for m, l in zip(val, losses)
            ]
            for update in controller.step(results):
                publish_update(update)
            # feedback is charged to the train step it follows
            train_seconds[-1] += time.perf_counter() - t0
        report.consumed += sum(len(b) for b in epoch_losses) + len(val)
        report.validated += len(val)
        log.info("epoch %d: loss %.5f error %.2f%% miss %.2f", epoch, report.losses[-1], mean, miss)
    report.train_step = Timing.of(train_seconds)
    report.params = params
    return controller


def run_training(config: ExperimentConfig, params: ModelParams | None = None) -> RunReport:
    """Train from scratch (or from ``params``).

    The in-process mode is single-threaded and bit-reproducible for a given
    seed; ``transport="tcp"`` runs every simulator in its own process.
    """
    if config.transport == "tcp":
        from .distributed import run_training_tcp

        return run_training_tcp(config, params)
    report = RunReport(config)
    params = _fresh_params(config, params)
    run = _Run(config)
    for sim in run.sims:
        report.initial_theta[sim.sim_id] = _theta(sim.states)
    interleaver = Interleaver(run.streams, config.batch_size, config.poll_timeout)
    try:
        train_epochs(config, params, interleaver, run.validation_samples, run.control.publish, report)
        report.stats_published = run.collect_stats()
        # validation sets are drawn from a simulator too
        if report.stats_published != report.consumed:
            raise AccountingError(f"simulators published {report.stats_published}, trainer consumed {report.consumed}")
        # updates sent after the last epoch are applied at the next sample boundary
        for ep in run.endpoints:
            ep.drain_control()
        for sim in run.sims:
            report.final_theta[sim.sim_id] = _theta(sim.states)
    finally:
        run.close()
    report.sim_step = Timing.of([t for s in run.streams for t in s.seconds])
    return report
