"""Evaluation metrics and seed-aggregated reporting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from stagealloc import kernels


def average_ranks(x):
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    # boundaries of runs of equal values in sorted order
    edges = np.flatnonzero(np.diff(xs) != 0) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [len(x)]])
    avg = (starts + ends + 1) / 2.0  # mean of ranks start+1 .. end
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def spearman_rs(x, y) -> float:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    if len(x) < 2:
        raise ValueError("need at least 2 observations")
    rx, ry = average_ranks(x), average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    sx, sy = np.sqrt((rx * rx).sum()), np.sqrt((ry * ry).sum())
    if sx == 0.0 or sy == 0.0:
        raise ValueError("rank correlation undefined for constant input")
    return float(np.clip((rx * ry).sum() / (sx * sy), -1.0, 1.0))


@dataclass
class Convergence:
    steps: float
    reached: bool


def convergence_steps(curve, frac=0.95) -> Convergence:
    """First env-step count where Return% reaches ``frac`` x final Return%,
    linearly interpolated between samples."""
    pts = np.asarray(curve, dtype=float)
    if pts.size == 0:
        raise ValueError("empty curve")
    steps, vals = pts[:, 0], pts[:, 1]
    thr = frac * vals[-1]
    if vals[0] >= thr:
        return Convergence(float(steps[0]), True)
    for i in range(1, len(vals)):
        if vals[i] >= thr:
            v0, v1 = vals[i - 1], vals[i]
            s0, s1 = steps[i - 1], steps[i]
            return Convergence(float(s0 + (thr - v0) / (v1 - v0) * (s1 - s0)), True)
    return Convergence(float(steps[-1]), False)


def gradient_variance(norms, window) -> float:
    norms = np.asarray(norms, dtype=float)
    if window < 1 or len(norms) < window:
        raise ValueError(f"need at least {window} gradient norms, got {len(norms)}")
    return kernels.window_variance(norms, window)


def utilization_rate(trace, budget) -> float:
    c = np.asarray(trace, dtype=float)
    return float(np.mean(np.minimum(c, budget) / budget))


def overutilization_rate(trace, budget) -> float:
    c = np.asarray(trace, dtype=float)
    return float(np.mean((np.maximum(c, budget) - budget) / budget))


@dataclass
class MetricReport:
    name: str
    values: list = field(default_factory=list)  # per seed; None marks a missing seed

    @property
    def present(self):
        return [v for v in self.values if v is not None and not (isinstance(v, float) and math.isnan(v))]

    @property
    def mean(self):
        p = self.present
        return float(np.mean(p)) if p else float("nan")

    @property
    def std(self):
        p = self.present
        return float(np.std(p, ddof=1)) if len(p) > 1 else float("nan")

    @property
    def complete(self):
        return len(self.present) == len(self.values)

    def cell(self, digits=3):
        if not self.present:
            return "missing"
        s = f"{self.mean:.{digits}f}(±{self.std:.{digits}f})"
        return s if self.complete else s + " [incomplete]"
