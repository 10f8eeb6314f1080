"""Per-step timings for simulation and training, and preview renders."""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..controller import FeedbackPolicy, ValidationResult, feedback_step
from ..net import backward_and_step, init_params, predict
from ..render import LINK_PALETTE, write_ppm
from ..transport import encode
from .config import ExperimentConfig
from .simulator import Simulator
from .training import Timing

TIMING_HEADER = ("step", "mean_ms", "std_ms", "count")


@dataclass
class TimingTable:
    simulation: Timing
    train: Timing

    def rows(self) -> list[tuple]:
        return [
            ("simulation_step", self.simulation.mean_ms, self.simulation.std_ms, self.simulation.count),
            ("train_step", self.train.mean_ms, self.train.std_ms, self.train.count),
        ]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TIMING_HEADER)
            w.writerows(self.rows())


def measure_runtimes(
    config: ExperimentConfig,
    steps: int = 200,
    warmup: int = 20,
    micro_batch: int | None = None,
) -> TimingTable:
    """Mean and spread of one simulation step and one train step.

    A simulation step is sample + render + encode. A train step is forward,
    backward and the optimizer update on one batch, plus applying one round
    of prior updates to a simulator.
    """
    sim = Simulator(0, config.seed, config.render_config, bins=config.bins)
    sim_times = []
    for i in range(warmup + steps):
        t0 = time.perf_counter()
        encode(sim.step())
        if i >= warmup:
            sim_times.append(time.perf_counter() - t0)

    batch = [sim.step() for _ in range(config.batch_size)]
    images = np.stack([m.image for m in batch])
    targets = np.stack([m.beliefs for m in batch])
    params = init_params(channels=config.channels, stages=config.stages, seed=config.seed)
    optimizer = config.make_optimizer()
    policy = FeedbackPolicy(config.top_fraction, config.decay, (0,))
    results = [ValidationResult(m.sample_id, float(k), tuple(int(b) for b in m.bins)) for k, m in enumerate(batch)]
    train_times = []
    for i in range(warmup + steps):
        t0 = time.perf_counter()
        backward_and_step((images, targets), params, optimizer, micro_batch=micro_batch)
        updates, _ = feedback_step(results, policy, sim.states)
        for u in updates:
            sim.apply(u)
        if i >= warmup:
            train_times.append(time.perf_counter() - t0)
    return TimingTable(Timing.of(sim_times), Timing.of(train_times))


def overlay(image: np.ndarray, beliefs: np.ndarray, palette=None) -> np.ndarray:
    """Blend belief planes onto the image, one color per joint."""
    palette = np.asarray(palette or LINK_PALETTE, dtype=np.float32)
    out = 0.5 * image.astype(np.float32)
    for j, plane in enumerate(beliefs):
        color = palette[j % len(palette)].reshape(3, 1, 1)
        out = out * (1 - plane[None]) + color * plane[None]
    return np.clip(out, 0.0, 1.0)


def render_preview(seed: int, count: int, out_dir, config: ExperimentConfig | None = None, params=None) -> list[Path]:
    """Write ``count`` PPM composites of images with belief overlays.

    With ``params`` the overlay shows the network's prediction instead of
    the ground truth.
    """
    config = config or ExperimentConfig(seed=seed)
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    sim = Simulator(0, seed, config.render_config, bins=config.bins)
    paths = []
    for i in range(count):
        msg = sim.step()
        beliefs = msg.beliefs
        if params is not None:
            beliefs = np.clip(predict(params, msg.image[None])[-1][0], 0.0, 1.0)
        composite = np.concatenate([msg.image, overlay(msg.image, beliefs)], axis=2)
        path = out_dir / f"preview_{seed}_{i:04d}.ppm"
        write_ppm(composite, path)
        paths.append(path)
    return paths
