"""Per-request Lagrangian decision rule, quota-constrained greedy allocation,
Return% and a bisection search for the multiplier."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from stagealloc import kernels


class InfeasibleBudget(ValueError):
    pass


def decide(q_values, costs, lam) -> int:
    """argmax_a Q(a) - lam*C(a); ties go to the lower cost, then lower index."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    q = np.asarray(q_values, dtype=float)[None, :]
    c = np.asarray(costs, dtype=float)[None, :]
    return int(kernels.decide_batch(q, c, lam)[0])


def decide_request(env, s, q_fn, c_fn, lam):
    """Joint action for one request given callables returning per-joint-action
    Q and C vectors (ordered as ``env.joint_actions``)."""
    j = decide(q_fn(s), c_fn(s), lam)
    return tuple(int(x) for x in env.joint_actions[j])


def decide_all(q, c, lam):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return kernels.decide_batch(q, c, lam)


def aggregate_cost(q, c, lam) -> float:
    pick = decide_all(q, c, lam)
    return float(c[np.arange(len(pick)), pick].sum())


def action_quota(joint_idx, n_joint):
    """Per-joint-action caps: logged frequencies of the evaluation split."""
    return np.bincount(np.asarray(joint_idx), minlength=n_joint).astype(np.int64)


@dataclass
class AllocationPlan:
    assignment: np.ndarray  # (M,) joint-action index per request
    predicted: np.ndarray  # (M,) predicted Q of the assigned action

    @property
    def predicted_total(self):
        return float(self.predicted.sum())

    def value_under(self, q):
        q = np.asarray(q)
        return float(q[np.arange(len(self.assignment)), self.assignment].sum())

    def write_csv(self, path, true_q=None, costs=None):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        m = len(self.assignment)
        idx = np.arange(m)
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["request_id", "action", "predicted_q", "true_q", "cost"])
            for i in range(m):
                a = int(self.assignment[i])
                w.writerow([i, a, repr(float(self.predicted[i])),
                            "" if true_q is None else repr(float(true_q[idx[i], a])),
                            "" if costs is None else repr(float(costs[idx[i], a]))])
        tmp.replace(path)


def greedy_allocate(predicted_q, quota) -> AllocationPlan:
    """Walk (request, action) pairs by predicted Q descending and take a pair
    whenever the request is still open and the action has quota left."""
    q = np.asarray(predicted_q, dtype=float)
    quota = np.asarray(quota, dtype=np.int64)
    m, a = q.shape
    if quota.shape != (a,):
        raise ValueError(f"quota has shape {quota.shape}, expected ({a},)")
    if np.any(quota < 0):
        raise ValueError("quota counts must be non-negative")
    if quota.sum() < m:
        raise ValueError(f"quota covers {int(quota.sum())} assignments but there are {m} requests")
    assign = kernels.greedy_assign(q, quota)
    return AllocationPlan(assign, q[np.arange(m), assign])


def return_percent(plan: AllocationPlan, ground_truth_q, reference: AllocationPlan) -> float:
    """Ground-truth revenue of ``plan`` relative to the ground-truth model's
    own plan under the same quota, x100."""
    denom = reference.value_under(ground_truth_q)
    if denom == 0.0:
        raise ZeroDivisionError("reference plan has zero ground-truth revenue")
    return 100.0 * plan.value_under(ground_truth_q) / denom


def binary_search_lambda(q, c, budget, rel_width=1e-3, grid=None) -> float:
    """Smallest multiplier (to relative width ``rel_width``) whose induced
    aggregate cost fits ``budget``."""
    q = np.asarray(q, dtype=float)
    c = np.asarray(c, dtype=float)
    if aggregate_cost(q, c, 0.0) <= budget:
        return 0.0
    grid = np.logspace(-6, 12, 37) if grid is None else np.asarray(grid)
    prev = 0.0
    hi = None
    for lam in grid:
        if aggregate_cost(q, c, lam) <= budget:
            hi = float(lam)
            break
        prev = float(lam)
    if hi is None:
        floor = float(c.min(axis=1).sum())
        raise InfeasibleBudget(f"budget {budget:g} is below even the min-cost plan ({floor:g}) "
                               f"or needs lambda beyond {grid[-1]:g}")
    lo = prev
    while hi - lo > rel_width * hi:
        mid = 0.5 * (lo + hi)
        if aggregate_cost(q, c, mid) <= budget:
            hi = mid
        else:
            lo = mid
    return hi
