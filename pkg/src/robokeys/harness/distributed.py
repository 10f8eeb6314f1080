"""Socket mode: one process per simulator, TCP between them and the trainer."""

from __future__ import annotations

import logging
import socket
import subprocess
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass

from ..net import ModelParams, backward_and_step, init_params
from ..transport import SAMPLE, STATS, Interleaver, Publisher, Stats, Subscriber, SubscriberDemux
from .config import ExperimentConfig
from .simulator import Simulator
from .training import RunReport, Timing, _fresh_params, _stack, _theta, train_epochs

log = logging.getLogger(__name__)


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def simulator_command(config: ExperimentConfig, sim_id: int, endpoint: str, control: str | None = None,
                      count: int | None = None) -> list[str]:
    w, h = config.image_size
    cmd = [
        sys.executable, "-m", "robokeys.harness.cli", "simulate",
        "--endpoint", endpoint,
        "--sim-id", str(sim_id),
        "--seed", str(config.seed),
        "--width", str(w),
        "--height", str(h),
        "--distractors", str(config.distractors[0]), str(config.distractors[1]),
        "--bins", str(config.bins),
    ]
    if config.injector_distractors:
        cmd += ["--injector-distractors", str(config.injector_distractors)]
    if control:
        cmd += ["--control", control]
    if count is not None:
        cmd += ["--count", str(count)]
    return cmd


@contextmanager
def simulator_processes(config: ExperimentConfig, endpoint: str, controls: list[str | None] | None = None):
    """Start ``config.sim_count`` simulator processes publishing to ``endpoint``."""
    controls = controls or [None] * config.sim_count
    procs = [
        subprocess.Popen(simulator_command(config, i, endpoint, controls[i]), stdin=subprocess.DEVNULL)
        for i in range(config.sim_count)
    ]
    try:
        yield procs
    finally:
        for p in procs:
            try:
                p.wait(timeout=10)
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait()


def _check_alive(procs) -> None:
    for i, p in enumerate(procs):
        if p.poll() not in (None, 0):
            raise RuntimeError(f"simulator {i} exited with status {p.returncode}")


class _WatchedInterleaver(Interleaver):
    """Aborts the run with a diagnostic if a simulator process dies."""

    def __init__(self, procs, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.procs = procs

    def next_batch(self) -> list:
        _check_alive(self.procs)
        return super().next_batch()


def run_training_tcp(config: ExperimentConfig, params: ModelParams | None = None) -> RunReport:
    """Training with simulator processes.

    Samples arrive in whatever order the processes produce them, so unlike
    the in-process mode the run is not bit-reproducible. Validation samples
    are drawn locally from the same uniform-prior stream the in-process mode
    uses.
    """
    report = RunReport(config)
    params = _fresh_params(config, params)
    sub = Subscriber(f"tcp://127.0.0.1:{free_port()}", types=[SAMPLE, STATS])
    controls = [f"tcp://127.0.0.1:{free_port()}" for _ in range(config.sim_count)]
    validator = Simulator(0, config.seed, config.render_config, bins=config.bins)
    for i in range(config.sim_count):
        report.initial_theta[i] = _theta(validator.states)
    try:
        with simulator_processes(config, sub.endpoint, controls) as procs:
            publishers = {}

            def publish_update(update):
                i = update.target_sim_id
                if i not in publishers:
                    publishers[i] = Publisher(controls[i])
                publishers[i].publish(update)

            demux = SubscriberDemux(sub, range(config.sim_count))
            streams = [demux.stream(i) for i in range(config.sim_count)]
            interleaver = _WatchedInterleaver(procs, streams, config.batch_size, config.poll_timeout)

            def validation(epoch):
                return [validator.validation_sample(epoch, i, config.validation_size) for i in range(config.validation_size)]

            controller = train_epochs(config, params, interleaver, validation, publish_update, report)
            for p in publishers.values():
                p.close()
            sub.close()
    finally:
        sub.close()
    theta = [s.concentration.tolist() for s in controller.states]
    for i in range(config.sim_count):
        targeted = config.feedback_enabled and i in config.target_sim_ids
        report.final_theta[i] = theta if targeted else report.initial_theta[i]
    latest: dict[int, int] = {}
    for m in demux.other:
        if isinstance(m, Stats):
            latest[m.source_id] = max(latest.get(m.source_id, 0), m.published)
    report.stats_published = sum(latest.values())
    return report


# ---------------------------------------------------------------- throughput


@dataclass
class ThroughputReport:
    sim_count: int
    image_size: tuple[int, int]
    production_rate: float  # samples/s, all simulators together
    consumption_rate: float  # samples/s taken by the trainer
    starvation_fraction: float  # share of trainer wall time spent waiting for samples
    train_step: Timing
    skips: int

    @property
    def keeps_up(self) -> bool:
        return self.production_rate >= self.consumption_rate


def measure_production(config: ExperimentConfig, seconds: float = 5.0) -> float:
    """Aggregate samples per second with every simulator process running flat out."""
    sub = Subscriber(f"tcp://127.0.0.1:{free_port()}", types=[SAMPLE])
    try:
        with simulator_processes(config, sub.endpoint):
            # a first sample from every simulator marks the end of start-up
            started = set()
            while len(started) < config.sim_count:
                started.add(sub.next(timeout=120).sim_id)
            t0 = time.perf_counter()
            count = 0
            while time.perf_counter() - t0 < seconds:
                try:
                    sub.next(timeout=1.0)
                    count += 1
                except TimeoutError:
                    pass
            elapsed = time.perf_counter() - t0
            sub.close()
    finally:
        sub.close()
    return count / elapsed


def measure_throughput(
    config: ExperimentConfig,
    steps: int = 20,
    warmup: int = 2,
    micro_batch: int | None = None,
    production_seconds: float = 5.0,
    params: ModelParams | None = None,
) -> ThroughputReport:
    """Producer capacity versus trainer demand with simulator processes.

    Production is measured with the simulators alone; then the trainer runs
    ``warmup + steps`` steps fed by the same processes, recording how long it
    waits for each batch.
    """
    production = measure_production(config, production_seconds)
    params = params if params is not None else init_params(
        channels=config.channels, stages=config.stages, seed=config.seed
    )
    optimizer = config.make_optimizer()
    sub = Subscriber(f"tcp://127.0.0.1:{free_port()}", types=[SAMPLE])
    waits, trains = [], []
    try:
        with simulator_processes(config, sub.endpoint) as procs:
            demux = SubscriberDemux(sub, range(config.sim_count))
            inter = _WatchedInterleaver(procs, [demux.stream(i) for i in range(config.sim_count)],
                                        config.batch_size, config.poll_timeout)
            for step in range(warmup + steps):
                t0 = time.perf_counter()
                batch = inter.next_batch()
                t1 = time.perf_counter()
                backward_and_step(_stack(batch), params, optimizer, micro_batch=micro_batch)
                t2 = time.perf_counter()
                if step >= warmup:
                    waits.append(t1 - t0)
                    trains.append(t2 - t1)
            sub.close()
    finally:
        sub.close()
    total = sum(waits) + sum(trains)
    return ThroughputReport(
        sim_count=config.sim_count,
        image_size=tuple(config.image_size),
        production_rate=production,
        consumption_rate=config.batch_size * steps / total,
        starvation_fraction=sum(waits) / total,
        train_step=Timing.of(trains),
        skips=sum(inter.skips),
    )
