"""Closed-loop revenue/cost balancing.

A learned one-step utilization model drives a receding-horizon search over
lambda sequences; a PI feedback rule, per-interval binary search and a fixed
lambda serve as baselines. The plant is a first-order lag on the load
produced by per-request Lagrangian decisions against a frozen pool of
(Q, cost) tables.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from stagealloc import allocator, kernels, metrics
from stagealloc.envsim import TrafficProfile, generate_traffic
from stagealloc.nncore import MLPRegressor

CONTROLLERS = ("mpc", "feedback", "binary_search", "static")
N_EXO = 3


def default_lambda_grid():
    return np.concatenate([[0.0], np.logspace(0.0, 3.0, 25)])


@dataclass
class MPCConfig:
    horizon: int = 10
    alpha: float = 0.4
    beta: float = 8.0
    budget: float = 0.8
    lam_grid: tuple = tuple(default_lambda_grid())
    refine_passes: int = 2
    max_sweeps: int = 6
    per_step: bool = True  # oscillation gate per step, else once for the whole horizon
    forecast: str = "oracle"  # "oracle" uses the traffic profile, "persistence" the last count

    def __post_init__(self):
        self.lam_grid = tuple(float(x) for x in self.lam_grid)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.budget <= 0:
            raise ValueError("budget must be > 0")
        if not self.lam_grid or min(self.lam_grid) < 0:
            raise ValueError("lambda grid must be non-empty and non-negative")
        if self.forecast not in ("oracle", "persistence"):
            raise ValueError(f"unknown forecast mode {self.forecast!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class FeedbackConfig:
    kp: float = 80.0
    ki: float = 0.1
    integral_limit: float = 20.0


@dataclass
class ControllerState:
    lam: float = 0.0
    history: list = field(default_factory=list)
    plan: np.ndarray | None = None  # last solved sequence
    integral: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


# --------------------------------------------------------------------------
# system model


def exo_features(counts, steps, base, step_seconds=60, day_seconds=86400):
    """Per-interval exogenous inputs: relative traffic and time of day."""
    counts = np.asarray(counts, dtype=float)
    phase = 2 * np.pi * (np.asarray(steps) * step_seconds % day_seconds) / day_seconds
    return np.stack([counts / base, np.sin(phase), np.cos(phase)], axis=-1)


@dataclass
class SystemModel:
    regressor: MLPRegressor
    rmse: float
    value_range: float

    def inputs(self, c, exo, lam):
        c = np.atleast_1d(np.asarray(c, dtype=float))
        exo = np.atleast_2d(exo)
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        return np.column_stack([c, exo, np.log1p(lam)])

    def predict(self, c, exo, lam):
        return np.maximum(self.regressor.predict(self.inputs(c, exo, lam))[:, 0], 0.0)

    def kernel_params(self):
        p = self.regressor.params
        r = self.regressor
        return (p["W0"], p["b0"], p["W1"], p["b1"], p["W2"], p["b2"],
                r.x_mean, r.x_std, float(r.y_mean[0]), float(r.y_std[0]))

    def rollout(self, c0, exo, lams):
        """Trajectories ``(G, N+1)`` for each candidate row of ``lams``."""
        return kernels.rollout(c0, exo, lams, self.kernel_params())

    def to_arrays(self):
        out = self.regressor.to_arrays("g/")
        out["g/rmse"] = np.array(self.rmse)
        out["g/value_range"] = np.array(self.value_range)
        return out

    @classmethod
    def from_arrays(cls, arrays):
        reg = MLPRegressor.from_arrays({k: v for k, v in arrays.items() if k not in ("g/rmse", "g/value_range")}, "g/")
        return cls(reg, float(arrays["g/rmse"]), float(arrays["g/value_range"]))


def fit_system_model(c, exo, lam, c_next, hidden=(32, 32), iterations=3000, holdout=0.2, seed=0) -> SystemModel:
    """Least-squares fit of next utilization on (utilization, exo, lambda)."""
    c, lam, c_next = (np.asarray(v, dtype=float) for v in (c, lam, c_next))
    exo = np.asarray(exo, dtype=float).reshape(len(c), -1)
    n = len(c)
    if n < 100:
        raise ValueError(f"need at least 100 transitions to fit the system model, got {n}")
    if len(hidden) != 2:
        raise ValueError("the rollout kernel expects exactly two hidden layers")
    perm = np.random.default_rng([seed, 21]).permutation(n)
    n_hold = max(1, int(round(holdout * n)))
    hold, train = perm[:n_hold], perm[n_hold:]
    reg = MLPRegressor(2 + exo.shape[1], hidden, 1, seed=seed)
    x = np.column_stack([c, exo, np.log1p(lam)])
    reg.fit(x[train], c_next[train], iterations=iterations)
    model = SystemModel(reg, 0.0, float(np.ptp(c_next)))
    pred = model.predict(c[hold], exo[hold], lam[hold])
    model.rmse = float(np.sqrt(np.mean((pred - c_next[hold]) ** 2)))
    return model


# --------------------------------------------------------------------------
# objective and solver


def mpc_objective(lam_seq, c_t, exo, model: SystemModel, cfg: MPCConfig, c_prev=None) -> float:
    """Decay-weighted tracking cost of the rolled trajectory plus the
    over-budget oscillation penalty. ``c_prev`` is the utilization measured
    one interval before ``c_t`` (defaults to ``c_t``)."""
    lam_seq = np.asarray(lam_seq, dtype=float)
    if lam_seq.shape != (cfg.horizon,):
        raise ValueError(f"expected {cfg.horizon} lambdas, got shape {lam_seq.shape}")
    traj = model.rollout(c_t, exo, lam_seq[None])
    return float(trajectory_cost(traj, c_t if c_prev is None else c_prev, cfg)[0])


def trajectory_cost(traj, c_prev, cfg: MPCConfig):
    return kernels.mpc_cost(traj, c_prev, cfg.budget, cfg.alpha, cfg.beta, cfg.per_step)


def _local_grid(value, grid, shrink):
    """Geometric neighbourhood of ``value`` for refinement passes."""
    pos = grid[grid > 0]
    ratio = (pos[1] / pos[0]) if len(pos) > 1 else 2.0
    span = ratio ** shrink
    if value <= 0:
        return np.concatenate([[0.0], np.geomspace(pos[0] * span / ratio, pos[0], 5)])
    return value * np.geomspace(1.0 / span, span, 9)


def solve_lambda_sequence(c_t, exo, model: SystemModel, cfg: MPCConfig, warm_start=None, c_prev=None):
    """Coordinate descent over per-step lambdas.

    Starts from ``warm_start`` (the previous plan shifted by one, padded with
    its last element), sweeps the coarse grid until no position improves, then
    runs ``refine_passes`` sweeps on shrinking local grids. Only strict
    improvements are accepted, so an unimprovable start is returned as is.
    """
    n = cfg.horizon
    exo = np.asarray(exo, dtype=float).reshape(n, -1)
    grid = np.asarray(cfg.lam_grid)
    c_prev = c_t if c_prev is None else c_prev
    if warm_start is None:
        seq = np.full(n, grid[0])
    else:
        seq = np.asarray(warm_start, dtype=float).copy()
        if seq.shape != (n,) or np.any(seq < 0):
            raise ValueError("warm start must hold horizon non-negative lambdas")
    best = trajectory_cost(model.rollout(c_t, exo, seq[None]), c_prev, cfg)[0]

    def sweep(candidates_for):
        nonlocal seq, best
        improved = False
        for i in range(n):
            cand = candidates_for(seq[i])
            lams = np.repeat(seq[None], len(cand), axis=0)
            lams[:, i] = cand
            costs = trajectory_cost(model.rollout(c_t, exo, lams), c_prev, cfg)
            k = int(np.argmin(costs))
            if costs[k] < best:
                best, seq = costs[k], lams[k].copy()
                improved = True
        return improved

    for _ in range(cfg.max_sweeps):
        if not sweep(lambda v: grid):
            break
    for p in range(cfg.refine_passes):
        sweep(lambda v, p=p: _local_grid(v, grid, 1.0 / (2 ** p)))
    return seq


def shift_plan(plan):
    plan = np.asarray(plan, dtype=float)
    return np.concatenate([plan[1:], plan[-1:]])


def feedback_step(state: ControllerState, c_t, budget, cfg: FeedbackConfig | None = None) -> float:
    """Incremental PI update of lambda on the relative budget error."""
    cfg = cfg or FeedbackConfig()
    if state.lam < 0:
        raise ValueError("lambda must be >= 0")
    e = (c_t - budget) / budget
    state.integral = float(np.clip(state.integral + e, -cfg.integral_limit, cfg.integral_limit))
    if e == 0.0:
        return state.lam
    state.lam = max(0.0, state.lam + cfg.kp * e + cfg.ki * state.integral)
    return state.lam


# --------------------------------------------------------------------------
# plant


@dataclass
class RequestPool:
    """Frozen per-request Q and cost tables the plant samples traffic from."""

    q: np.ndarray  # (P, A)
    c: np.ndarray  # (P, A)

    def __post_init__(self):
        if self.q.shape != self.c.shape or self.q.ndim != 2:
            raise ValueError("q and c tables must share a (P, A) shape")

    def __len__(self):
        return len(self.q)

    def chosen_cost(self, rows, lam):
        q, c = self.q[rows], self.c[rows]
        j = kernels.decide_batch(q, c, lam)
        return float(c[np.arange(len(rows)), j].sum())

    def mean_cost(self, lam):
        return self.chosen_cost(np.arange(len(self)), lam) / len(self)


@dataclass
class PlantConfig:
    rho: float = 0.5  # utilization lag
    headroom: float = 1.25  # lambda=0 demand at mean traffic, in budgets
    budget: float = 0.8
    step_seconds: int = 60
    day_seconds: int = 86400


class Plant:
    """Utilization follows c' = rho c + (1 - rho) load, where load is the
    estimated cost of the chosen actions over the interval's capacity."""

    def __init__(self, pool: RequestPool, base_qps, cfg: PlantConfig | None = None):
        self.pool = pool
        self.cfg = cfg or PlantConfig()
        self.base = float(base_qps)
        self.capacity = pool.mean_cost(0.0) * self.base / (self.cfg.headroom * self.cfg.budget)

    def request_rows(self, counts, seed):
        rng = np.random.default_rng([seed, 31])
        return [rng.integers(0, len(self.pool), int(n)) for n in counts]

    def load(self, rows, lam):
        return self.pool.chosen_cost(rows, lam) / self.capacity

    def advance(self, c, load):
        return self.cfg.rho * c + (1.0 - self.cfg.rho) * load

    def exo(self, counts, steps):
        return exo_features(counts, steps, self.base, self.cfg.step_seconds, self.cfg.day_seconds)


def control_traffic(seed, horizon=1440, base_qps=100.0, bursts_per_day=4):
    """Diurnal traffic with seeded bursts of 1.5-2x lasting 15-45 intervals."""
    rng = np.random.default_rng([seed, 41])
    n_bursts = int(round(bursts_per_day * horizon / 1440))
    slots = np.arange(min(30, horizon - 1), max(horizon - 60, min(30, horizon - 1) + 1))
    starts = np.sort(rng.choice(slots, min(n_bursts, len(slots)), replace=False))
    bursts = tuple((int(s), int(rng.integers(15, 46)), float(rng.uniform(1.5, 2.0))) for s in starts)
    return TrafficProfile(base_qps=base_qps, amplitude=0.4, bursts=bursts, noise=0.05, seed=seed,
                          phase_seconds=float(rng.uniform(0, 86400)))


def exploration_history(plant: Plant, profile: TrafficProfile, horizon, grid, seed=0):
    """Transitions under piecewise-constant random lambdas for fitting g."""
    rng = np.random.default_rng([seed, 51])
    _, counts = generate_traffic(profile, horizon)
    rows = plant.request_rows(counts, seed + 1000)
    grid = np.asarray(grid)
    lo, hi = grid[grid > 0].min(), grid.max()
    lam = np.empty(horizon)
    t = 0
    while t < horizon:
        d = int(rng.integers(5, 31))
        lam[t:t + d] = 0.0 if rng.random() < 0.1 else float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        t += d
    c = np.empty(horizon + 1)
    c[0] = plant.cfg.budget
    for t in range(horizon):
        c[t + 1] = plant.advance(c[t], plant.load(rows[t], lam[t]))
    return c[:-1], plant.exo(counts, np.arange(horizon)), lam, c[1:]


def train_system_model(plant: Plant, seed=0, days=4, grid=None, iterations=3000):
    """Fit g on exploration days with distinct traffic seeds and phases, so
    time-of-day features are not confounded with one day's bursts."""
    grid = default_lambda_grid() if grid is None else grid
    steps_per_day = plant.cfg.day_seconds // plant.cfg.step_seconds
    parts = [exploration_history(plant, control_traffic(10_000 + 100 * seed + d, steps_per_day, plant.base),
                                 steps_per_day, grid, 100 * seed + d) for d in range(days)]
    cols = [np.concatenate([p[i] for p in parts]) for i in range(4)]
    return fit_system_model(*cols, iterations=iterations, seed=seed)


# --------------------------------------------------------------------------
# closed loop


@dataclass
class ClosedLoopResult:
    controller: str
    trace: list  # dict rows
    mu: float
    nu: float

    def summary(self):
        return {"controller": self.controller, "mu": self.mu, "nu": self.nu}


def _forecast_exo(plant, profile, counts, t, n, mode):
    steps = np.arange(t, t + n)
    if mode == "oracle":
        expected = profile.expected(t + n)[t:]
        return plant.exo(expected, steps)
    last = counts[t - 1] if t > 0 else plant.base
    return plant.exo(np.full(n, last), steps)


def closed_loop_run(controller, plant: Plant, profile: TrafficProfile, duration, model: SystemModel | None = None,
                    mpc: MPCConfig | None = None, feedback: FeedbackConfig | None = None, seed=0):
    """Simulate ``duration`` control intervals and return the trace with mu and nu."""
    if controller not in CONTROLLERS:
        raise ValueError(f"unknown controller {controller!r}; expected one of {CONTROLLERS}")
    if controller == "mpc" and model is None:
        raise ValueError("the mpc controller needs a fitted system model")
    mpc = mpc or MPCConfig(budget=plant.cfg.budget)
    budget = plant.cfg.budget
    _, counts = generate_traffic(profile, duration)
    rows = plant.request_rows(counts, seed)
    grid = np.asarray(mpc.lam_grid)
    state = ControllerState()
    per_request = budget * plant.capacity / plant.base
    if controller == "static":
        state.lam = _lambda_for(plant.pool, np.arange(len(plant.pool)), per_request * len(plant.pool), grid)
    c, c_prev = budget, budget
    trace = []
    for t in range(duration):
        if controller == "mpc":
            exo = _forecast_exo(plant, profile, counts, t, mpc.horizon, mpc.forecast)
            warm = None if state.plan is None else shift_plan(state.plan)
            state.plan = solve_lambda_sequence(c, exo, model, mpc, warm, c_prev)
            state.lam = float(state.plan[0])
        elif controller == "feedback" and t > 0:
            feedback_step(state, c, budget, feedback)
        elif controller == "binary_search" and t > 0:
            prev = rows[t - 1]
            state.lam = _lambda_for(plant.pool, prev, budget * plant.capacity * len(prev) / counts[t - 1], grid)
        load = plant.load(rows[t], state.lam)
        c_next = plant.advance(c, load)
        predicted = float(model.predict(c, plant.exo(counts[t:t + 1], [t]), state.lam)[0]) if model else float("nan")
        trace.append({"t": t, "traffic": int(counts[t]), "lambda": state.lam, "predicted": predicted,
                      "realized": c_next, "over_budget": int(c_next > budget)})
        state.history.append(c_next)
        c_prev, c = c, c_next
    util = np.array([r["realized"] for r in trace])
    return ClosedLoopResult(controller, trace, metrics.utilization_rate(util, budget),
                            metrics.overutilization_rate(util, budget))


def _lambda_for(pool: RequestPool, rows, cost_budget, grid):
    try:
        return allocator.binary_search_lambda(pool.q[rows], pool.c[rows], cost_budget, grid=grid[grid > 0])
    except allocator.InfeasibleBudget:
        return float(grid.max())


def write_trace_csv(result: ClosedLoopResult, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    cols = ["t", "traffic", "lambda", "predicted", "realized", "over_budget"]
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in result.trace:
            w.writerow([repr(float(r[k])) if isinstance(r[k], float) else r[k] for k in cols])
    tmp.replace(path)


def write_summary_json(results, path, extra=None):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    body = {"controllers": [r.summary() for r in results], **(extra or {})}
    tmp.write_text(json.dumps(body, sort_keys=True, indent=1))
    tmp.replace(path)


def sensitivity_sweep(plant: Plant, profile: TrafficProfile, duration, model: SystemModel, base: MPCConfig,
                      alphas=(0.2, 0.4, 0.6, 0.8, 1.0), betas=(0, 2, 4, 8, 16), horizons=(2, 5, 10, 15), seed=0):
    """Vary alpha, beta and N one at a time around ``base``; rows of
    (parameter, value, mu, nu)."""
    out = []
    for name, values in (("alpha", alphas), ("beta", betas), ("horizon", horizons)):
        for v in values:
            cfg = MPCConfig(**{**base.to_dict(), name: v})
            r = closed_loop_run("mpc", plant, profile, duration, model, cfg, seed=seed)
            out.append({"parameter": name, "value": float(v), "mu": r.mu, "nu": r.nu})
    return out
