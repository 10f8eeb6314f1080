"""Peak extraction from belief maps and localization error."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.ndimage import maximum_filter

DEFAULT_WINDOW = 5
DEFAULT_THRESHOLD = 0.1


@dataclass(frozen=True)
class JointDetections:
    """Per joint: integer pixel ``(u, v)`` (column, row) or ``None``."""

    points: tuple[Optional[tuple[int, int]], ...]
    values: tuple[Optional[float], ...]
    threshold: float

    def __len__(self):
        return len(self.points)


def nms_peaks(beliefs: np.ndarray, window: int = DEFAULT_WINDOW, threshold: float = DEFAULT_THRESHOLD) -> JointDetections:
    """Strongest local maximum per belief plane.

    A pixel survives non-maximum suppression when it is >= every value in the
    ``window x window`` neighbourhood clipped to the image. The largest
    survivor at or above ``threshold`` wins, ties going to the first pixel in
    row-major order.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("NMS window must be odd and >= 3")
    planes = np.asarray(beliefs)
    if planes.ndim == 2:
        planes = planes[None]
    points, values = [], []
    for plane in planes:
        local_max = maximum_filter(plane, size=window, mode="constant", cval=-np.inf)
        survivors = (plane >= local_max) & (plane >= threshold)
        if not survivors.any():
            points.append(None)
            values.append(None)
            continue
        masked = np.where(survivors, plane, -np.inf)
        idx = int(np.argmax(masked))
        v, u = divmod(idx, plane.shape[1])
        points.append((u, v))
        values.append(float(plane[v, u]))
    return JointDetections(tuple(points), tuple(values), float(threshold))


def localization_error(pred: Sequence[float], target: Sequence[float], width: int, height: int) -> float:
    """Euclidean pixel distance in percent of the image diagonal."""
    du = float(pred[0]) - float(target[0])
    dv = float(pred[1]) - float(target[1])
    return 100.0 * math.hypot(du, dv) / math.hypot(width, height)


@dataclass(frozen=True)
class Evaluation:
    errors: tuple[Optional[float], ...]  # None: missed, or joint not scored
    scored: tuple[bool, ...]
    mean: float
    miss_count: int

    @property
    def scored_count(self) -> int:
        return sum(self.scored)

    @property
    def miss_rate(self) -> float:
        n = self.scored_count
        return self.miss_count / n if n else 0.0


def evaluate(
    detections: JointDetections,
    ground_truth: Sequence[Optional[Sequence[float]]],
    width: int,
    height: int,
    miss_penalty: float | None = None,
) -> Evaluation:
    """Per-joint errors and their mean.

    ``ground_truth[j] is None`` marks a joint outside the frame; it is not
    scored. Missed joints are left out of the mean unless ``miss_penalty``
    (percent of diagonal) is given, in which case they count with that error.
    """
    if len(detections.points) != len(ground_truth):
        raise ValueError(
            f"{len(detections.points)} detections for {len(ground_truth)} ground-truth joints"
        )
    errors: list[Optional[float]] = []
    scored = []
    misses = 0
    contrib = []
    for det, gt in zip(detections.points, ground_truth):
        if gt is None:
            errors.append(None)
            scored.append(False)
            continue
        scored.append(True)
        if det is None:
            misses += 1
            errors.append(None)
            if miss_penalty is not None:
                contrib.append(float(miss_penalty))
            continue
        e = localization_error(det, gt, width, height)
        errors.append(e)
        contrib.append(e)
    mean = float(np.mean(contrib)) if contrib else float("nan")
    return Evaluation(tuple(errors), tuple(scored), mean, misses)


def aggregate(evals: Iterable[Evaluation], miss_penalty: float | None = None) -> tuple[float, float]:
    """Pooled ``(mean error, miss rate)`` over many samples' joints."""
    errs, misses, scored = [], 0, 0
    for ev in evals:
        for e, s in zip(ev.errors, ev.scored):
            if not s:
                continue
            scored += 1
            if e is None:
                misses += 1
                if miss_penalty is not None:
                    errs.append(miss_penalty)
            else:
                errs.append(e)
    mean = float(np.mean(errs)) if errs else float("nan")
    return mean, (misses / scored if scored else 0.0)


CSV_HEADER = ("sample_id", "joint_index", "error_pct", "detected")


def csv_rows(sample_id: int, evaluation: Evaluation) -> list[tuple]:
    rows = []
    for j, (e, s) in enumerate(zip(evaluation.errors, evaluation.scored)):
        if not s:
            continue
        rows.append((sample_id, j, "" if e is None else f"{e:.6f}", 0 if e is None else 1))
    return rows


def write_csv(path, rows: Iterable[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        w.writerows(rows)
