"""Training metrics: moving-average episode statistics, CSV rows and AUC."""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import asdict, dataclass, fields

import numpy as np

CSV_COLUMNS = ("step", "episodes", "mean_return_100", "mean_length_100", "sps", "loss_pg",
               "loss_baseline", "loss_entropy", "parameter_count", "inference_ms")
CSV_HEADER = ",".join(CSV_COLUMNS)


class MetricsWindow:
    """Ring of the last ``size`` episode returns and lengths."""

    def __init__(self, size: int = 100):
        if size < 1:
            raise ValueError("window size must be positive")
        self.returns: deque = deque(maxlen=size)
        self.lengths: deque = deque(maxlen=size)

    def update(self, episode_return: float, episode_length: float) -> tuple[float, float]:
        self.returns.append(float(episode_return))
        self.lengths.append(float(episode_length))
        return self.mean_return, self.mean_length

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns)) if self.returns else 0.0

    @property
    def mean_length(self) -> float:
        return float(np.mean(self.lengths)) if self.lengths else 0.0


def metrics_update(window: MetricsWindow, episode_return: float, episode_length: float):
    return window.update(episode_return, episode_length)


def sps(total_steps: float, elapsed: float) -> float:
    return total_steps / elapsed


@dataclass
class MetricsRow:
    step: int
    episodes: int
    mean_return_100: float
    mean_length_100: float
    sps: float
    loss_pg: float
    loss_baseline: float
    loss_entropy: float
    parameter_count: int
    inference_ms: float


class MetricsWriter:
    """Appends rows to a CSV file with a fixed header; steps must increase."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._fh.write(CSV_HEADER + "\n")
        self._last = None

    def write(self, row: MetricsRow) -> None:
        if self._last is not None and row.step <= self._last:
            raise ValueError(f"metrics step {row.step} does not increase past {self._last}")
        self._last = row.step
        self._fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                                for v in asdict(row).values()) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[MetricsRow]:
    types = {f.name: f.type for f in fields(MetricsRow)}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [MetricsRow(**{k: (int(v) if types[k] in ("int", int) else float(v))
                              for k, v in rec.items()}) for rec in reader]


def auc(curve) -> float:
    """Trapezoidal integral of ``(step, value)`` points divided by the step span."""
    pts = np.asarray(curve, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 2:
        raise ValueError("auc needs at least two (step, value) points")
    steps, vals = pts[:, 0], pts[:, 1]
    span = steps[-1] - steps[0]
    if span <= 0:
        raise ValueError("auc needs increasing steps")
    return float(np.sum((vals[1:] + vals[:-1]) * np.diff(steps)) / 2.0 / span)
