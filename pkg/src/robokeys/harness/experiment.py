"""Paired feedback-off / feedback-on runs and their summary curves."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig
from .training import RunReport, epochs_to_reach, run_training

log = logging.getLogger(__name__)

CURVE_HEADER = ("pair", "seed", "arm", "epoch", "error_pct", "miss_rate", "val_loss")
SUMMARY_HEADER = ("arm", "epoch", "mean_error_pct", "std_error_pct", "lower", "upper")


@dataclass
class PairResult:
    seed: int
    off: RunReport
    on: RunReport

    @property
    def target_error(self) -> float:
        """The error the feedback-off arm ends with."""
        return self.off.errors[-1]

    def epochs_to_target(self) -> tuple[int | None, int | None]:
        t = self.target_error
        return epochs_to_reach(self.off.errors, t), epochs_to_reach(self.on.errors, t)

    @property
    def feedback_faster(self) -> bool:
        off, on = self.epochs_to_target()
        return on is not None and off is not None and on < off


@dataclass
class ExperimentResult:
    pairs: list[PairResult]

    def curves(self, arm: str) -> np.ndarray:
        return np.array([getattr(p, arm).errors for p in self.pairs], dtype=np.float64)

    def envelope(self, arm: str) -> tuple[np.ndarray, np.ndarray]:
        """Per-epoch mean and 1-sigma standard deviation across pairs."""
        c = self.curves(arm)
        return c.mean(axis=0), c.std(axis=0)

    def faster_count(self) -> int:
        return sum(p.feedback_faster for p in self.pairs)

    def fraction_on_not_worse(self) -> float:
        on, _ = self.envelope("on")
        off, _ = self.envelope("off")
        return float(np.mean(on <= off)) if len(on) else 0.0

    def curve_rows(self) -> list[tuple]:
        rows = []
        for i, p in enumerate(self.pairs):
            for arm in ("off", "on"):
                r = getattr(p, arm)
                for e, (err, miss, vl) in enumerate(zip(r.errors, r.miss_rates, r.validation_losses)):
                    rows.append((i, p.seed, arm, e, f"{err:.6f}", f"{miss:.6f}", f"{vl:.8f}"))
        return rows

    def summary_rows(self) -> list[tuple]:
        rows = []
        for arm in ("off", "on"):
            mean, std = self.envelope(arm)
            for e, (m, s) in enumerate(zip(mean, std)):
                rows.append((arm, e, f"{m:.6f}", f"{s:.6f}", f"{m - s:.6f}", f"{m + s:.6f}"))
        return rows

    def write_csv(self, path, summary_path=None) -> None:
        _write(path, CURVE_HEADER, self.curve_rows())
        if summary_path is not None:
            _write(summary_path, SUMMARY_HEADER, self.summary_rows())


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def run_pair(config: ExperimentConfig, seed: int) -> PairResult:
    """Same seed, same simulator streams; only the feedback switch differs."""
    off = run_training(replace(config, seed=seed, feedback_enabled=False))
    on = run_training(replace(config, seed=seed, feedback_enabled=True))
    off.params = on.params = None
    return PairResult(seed, off, on)


def run_feedback_experiment(config: ExperimentConfig, pairs: int) -> ExperimentResult:
    if pairs < 1:
        raise ValueError("need at least one pair")
    results = []
    for i in range(pairs):
        pair = run_pair(config, config.seed + i)
        off, on = pair.epochs_to_target()
        log.info("pair %d: off %s on %s epochs to %.2f%%", i, off, on, pair.target_error)
        results.append(pair)
    return ExperimentResult(results)


def hard_bin_mass(theta: list[list[float]], joint: int, bins) -> float:
    """Dirichlet mean probability of ``bins`` for ``joint``."""
    t = np.asarray(theta[joint], dtype=np.float64)
    return float(t[list(bins)].sum() / t.sum())
