"""Cost estimation bench: simulated load tests per (value tier, queue length)
bucket, per-bucket cost, monotone queue-cost curves, elastic model / channel
tables, a degradation map, and the end-to-end per-request cost estimator.

A small shared-trunk multi-task regressor predicts each stage's realized
result size from request features and the joint action; those predicted sizes
are what the queue curves are evaluated at.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stagealloc import kernels, nncore
from stagealloc.envsim import Contexts, PipelineEnv

DEFAULT_QUEUE_GRID = (8, 16, 32, 64, 128, 256)
DEFAULT_DEGRADATION = (1.0, 0.9, 0.75)


class SaturatedLoadTest(RuntimeError):
    """Utilization hit 100%; the cost estimate is censored. Lower the QPS."""


@dataclass(frozen=True)
class Bucket:
    value_tier: int
    queue_length: int
    stage: int = 0

    def key(self):
        return (self.stage, self.value_tier, self.queue_length)


@dataclass
class LoadTestResult:
    bucket: Bucket
    p_percent: float
    n_machines: int
    cores_per_machine: int
    qps: float
    saturated: bool = False


def simulate_loadtest(env: PipelineEnv, bucket: Bucket, qps, n_machines, cores, seed=0,
                      noise=0.0, unit_cost=None) -> LoadTestResult:
    """Run the hidden machine model for one bucket at fixed QPS.

    ``unit_cost`` overrides the hidden per-request cost (used for isolated
    model/channel tests). Saturated runs are returned flagged, not raised.
    """
    if qps <= 0 or n_machines <= 0 or cores <= 0:
        raise ValueError("qps, n_machines and cores must be positive")
    c_true = float(env.true_queue_cost(bucket.stage, bucket.value_tier, bucket.queue_length)
                   if unit_cost is None else unit_cost)
    rng = np.random.default_rng([seed, bucket.stage, bucket.value_tier, bucket.queue_length])
    p = qps * c_true / (n_machines * cores) * 100.0 + noise * rng.standard_normal()
    saturated = p >= 100.0
    p = min(max(p, 0.0), 100.0)
    return LoadTestResult(bucket, p, int(n_machines), int(cores), float(qps), saturated)


def cost_per_bucket(r: LoadTestResult) -> float:
    """(p% x machines x cores) / QPS, in core-units per request."""
    if r.qps <= 0:
        raise ValueError("qps must be positive")
    return (r.p_percent / 100.0) * r.n_machines * r.cores_per_machine / r.qps


# --------------------------------------------------------------------------
# monotone curves


@dataclass
class CostCurve:
    knots: np.ndarray  # sorted distinct queue lengths
    values: np.ndarray  # fitted, non-decreasing

    def __call__(self, length):
        x = np.asarray(length, dtype=float)
        k, v = self.knots, self.values
        y = np.interp(x, k, v)
        if len(k) >= 2:
            lo_slope = (v[1] - v[0]) / (k[1] - k[0])
            hi_slope = (v[-1] - v[-2]) / (k[-1] - k[-2])
            y = np.where(x < k[0], v[0] + lo_slope * (x - k[0]), y)
            y = np.where(x > k[-1], v[-1] + hi_slope * (x - k[-1]), y)
        # costs are non-negative; the low-side extension is clamped at zero
        return np.maximum(y, 0.0)

    def to_dict(self):
        return {"knots": self.knots.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["knots"], dtype=float), np.asarray(d["values"], dtype=float))


def fit_monotone_curve(points) -> CostCurve:
    """Pool-adjacent-violators fit of cost against queue length.

    Repeated lengths are pooled with weight equal to their multiplicity.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be (queue_length, cost) pairs")
    x, y = pts[:, 0], pts[:, 1]
    knots, inv = np.unique(x, return_inverse=True)
    if len(knots) < 2:
        raise ValueError("need at least 2 distinct queue lengths to fit a curve")
    w = np.bincount(inv).astype(float)
    means = np.bincount(inv, weights=y) / w
    return CostCurve(knots, kernels.pav(means, w))


# --------------------------------------------------------------------------
# cost model


@dataclass
class CostModel:
    curves: dict  # (stage, tier) -> CostCurve
    model_cost: np.ndarray  # ranking model level -> cost
    channel_cost: np.ndarray  # per channel
    degradation: tuple = DEFAULT_DEGRADATION
    degradation_mode: str = "multiplicative"
    meta: dict = field(default_factory=dict)

    def f(self, level, base):
        """Degradation adjustment: returns total cost at ``level`` given base cost."""
        if not 0 <= level < len(self.degradation):
            raise ValueError(f"degradation level {level} outside [0, {len(self.degradation)})")
        if self.degradation_mode == "multiplicative":
            return self.degradation[level] * base
        if self.degradation_mode == "additive":
            # table entries are offsets (<= 0), floored so cost stays non-negative
            return np.maximum(base + self.degradation[level], 0.0)
        raise ValueError(f"unknown degradation mode {self.degradation_mode!r}")

    def to_dict(self):
        return {
            "curves": [{"stage": s, "tier": t, **c.to_dict()} for (s, t), c in sorted(self.curves.items())],
            "model_cost": self.model_cost.tolist(),
            "channel_cost": self.channel_cost.tolist(),
            "degradation": list(self.degradation),
            "degradation_mode": self.degradation_mode,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        curves = {(c["stage"], c["tier"]): CostCurve.from_dict(c) for c in d["curves"]}
        return cls(curves, np.asarray(d["model_cost"], dtype=float), np.asarray(d["channel_cost"], dtype=float),
                   tuple(d["degradation"]), d["degradation_mode"], d.get("meta", {}))

    def save(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))
        tmp.replace(path)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def estimate_cost_from_sizes(env: PipelineEnv, model: CostModel, tier, actions, sizes, degradation=0):
    """Vectorized C(s, a) for given per-stage effective queue lengths."""
    tier = np.asarray(tier)
    actions = np.asarray(actions)
    sizes = np.asarray(sizes, dtype=float)
    total = np.zeros(len(tier))
    for g in range(env.n_stages):
        for t in np.unique(tier):
            if (g, int(t)) not in model.curves:
                raise KeyError(f"no fitted cost curve for stage {g}, value tier {int(t)}")
            sel = tier == t
            total[sel] += model.curves[(g, int(t))](sizes[sel, g])
    total += np.cumsum(model.channel_cost)[actions[:, 0]]
    total += model.model_cost[env.rank_table[actions[:, 2], 0]]
    return model.f(degradation, total)


def estimate_cost(env: PipelineEnv, s, a, model: CostModel, degradation=0, predictor=None, sizes=None):
    """Estimated cost of joint action ``a`` for request ``s``.

    Result sizes come from ``sizes`` when given, else from ``predictor``.
    """
    a = env.validate_action(a)
    ctx = Contexts.stack([s])
    acts = np.array([a])
    if sizes is None:
        if predictor is None:
            raise ValueError("need either predicted sizes or a trained predictor")
        sizes = predictor.predict(env, ctx, acts)
    return float(estimate_cost_from_sizes(env, model, ctx.tier, acts, np.atleast_2d(sizes), degradation)[0])


# --------------------------------------------------------------------------
# action-result predictor


def _action_onehots(env, actions):
    return np.concatenate([np.eye(n)[actions[:, g]] for g, n in enumerate(env.action_counts)], axis=1)


class ResultPredictor:
    """Shared-trunk multi-task regressor: (request, joint action) -> per-stage
    result sizes. Trained on log1p sizes."""

    def __init__(self, env: PipelineEnv, hidden=(64, 64), seed=0):
        self.hidden = tuple(hidden)
        self.seed = seed
        n_in = env.state_dim + sum(env.action_counts)
        rng = np.random.default_rng([seed, 31])
        self.params = nncore.init_mlp(rng, "trunk/", (n_in,) + self.hidden)
        self.params.update(nncore.init_mlp(rng, "head/", (self.hidden[-1], env.n_stages)))
        self.x_mean = self.x_std = None
        self.y_mean = self.y_std = None
        self.trained = False

    def _inputs(self, env, ctx, actions):
        return np.concatenate([env.state_features(ctx), _action_onehots(env, np.asarray(actions))], axis=1)

    def _forward(self, x):
        n = len(self.hidden)
        # trunk is all-ReLU: run it as an MLP whose last layer is also ReLU
        h = x
        caches = []
        for i in range(n):
            h, c = nncore.dense_forward(h, self.params[f"trunk/W{i}"], self.params[f"trunk/b{i}"], "relu")
            caches.append(c)
        y, hc = nncore.mlp_forward(self.params, "head/", h, 1)
        return y, (caches, hc)

    def fit(self, env, ctx, actions, sizes, iterations=1500, batch=256, lr=3e-3):
        x = self._inputs(env, ctx, actions)
        y = np.log1p(np.asarray(sizes, dtype=float))
        self.x_mean, self.x_std = x.mean(0), x.std(0) + 1e-8
        self.y_mean, self.y_std = y.mean(0), y.std(0) + 1e-8
        xs = (x - self.x_mean) / self.x_std
        ys = (y - self.y_mean) / self.y_std
        rng = np.random.default_rng([self.seed, 37])
        opt = nncore.AdamState(lr=lr)
        for _ in range(iterations):
            idx = rng.integers(0, len(xs), size=batch)
            pred, (caches, hc) = self._forward(xs[idx])
            d = 2.0 * (pred - ys[idx]) / pred.size
            grads = {}
            dh = nncore.mlp_backward(self.params, "head/", d, hc, grads)
            for i in reversed(range(len(caches))):
                dh, dW, db = nncore.dense_backward(dh, caches[i])
                grads[f"trunk/W{i}"] = dW
                grads[f"trunk/b{i}"] = db
            self.params, opt = nncore.adam_update(self.params, grads, opt)
        self.trained = True
        return self

    def predict(self, env, ctx, actions):
        if not self.trained:
            raise RuntimeError("result predictor has not been trained")
        x = (self._inputs(env, ctx, actions) - self.x_mean) / self.x_std
        y, _ = self._forward(x)
        return np.maximum(np.expm1(y * self.y_std + self.y_mean), 0.0)

    def to_arrays(self):
        out = dict(self.params)
        out.update({"norm/x_mean": self.x_mean, "norm/x_std": self.x_std,
                    "norm/y_mean": self.y_mean, "norm/y_std": self.y_std})
        return out

    @classmethod
    def from_arrays(cls, env, arrays, hidden=(64, 64), seed=0):
        p = cls(env, hidden, seed)
        p.params = {k: v for k, v in arrays.items() if not k.startswith("norm/")}
        p.x_mean, p.x_std = arrays["norm/x_mean"], arrays["norm/x_std"]
        p.y_mean, p.y_std = arrays["norm/y_mean"], arrays["norm/y_std"]
        p.trained = True
        return p


# --------------------------------------------------------------------------
# the bench


@dataclass
class BenchConfig:
    queue_grid: tuple = DEFAULT_QUEUE_GRID
    qps: float = 200.0
    n_machines: int = 2
    cores: int = 8
    noise: float = 0.5  # std of p% measurement noise, in percentage points
    repeats: int = 3
    degradation: tuple = DEFAULT_DEGRADATION
    degradation_mode: str = "multiplicative"
    seed: int = 0


def run_bench(env: PipelineEnv, cfg: BenchConfig | None = None, log=None):
    """Load-test every bucket, fit curves, measure model and channel tables.

    Returns ``(CostModel, raw_rows)``. Saturated buckets are re-run at half the
    QPS until they are not.
    """
    cfg = cfg or BenchConfig()
    rows = []

    def measure(bucket, unit_cost=None, rep=0, kind="queue"):
        qps = cfg.qps
        while True:
            r = simulate_loadtest(env, bucket, qps, cfg.n_machines, cfg.cores,
                                  seed=[cfg.seed, rep], noise=cfg.noise, unit_cost=unit_cost)
            if not r.saturated:
                break
            if log:
                log(f"{kind} bucket {bucket.key()} saturated at qps={qps:g}; retrying at {qps / 2:g}")
            qps /= 2.0
        c = cost_per_bucket(r)
        rows.append({"kind": kind, "stage": bucket.stage, "tier": bucket.value_tier,
                     "queue_length": bucket.queue_length, "p": r.p_percent, "n": r.n_machines,
                     "cores": r.cores_per_machine, "qps": r.qps, "cost": c})
        return c

    curves = {}
    for g in range(env.n_stages):
        for t in range(env.cfg.n_tiers):
            pts = []
            for L in cfg.queue_grid:
                for rep in range(cfg.repeats):
                    pts.append((L, measure(Bucket(t, int(L), g), rep=rep)))
            curves[(g, t)] = fit_monotone_curve(pts)

    # isolated tests: extra cost of each ranking-model level and of each channel.
    # queue_length carries the table index for these rows.
    def isolated(true_cost, stage, kind, i):
        vals = [measure(Bucket(0, i, stage), unit_cost=true_cost, rep=rep, kind=kind)
                for rep in range(cfg.repeats)]
        return max(float(np.mean(vals)), 0.0)

    model_cost = np.array([isolated(c, 2, "model", i) for i, c in enumerate(env.cfg.model_cost)])
    channel_cost = np.array([isolated(c, 0, "channel", i) for i, c in enumerate(env.cfg.channel_cost)])
    meta = {"queue_grid": list(cfg.queue_grid), "qps": cfg.qps, "n_machines": cfg.n_machines,
            "cores": cfg.cores, "noise": cfg.noise, "repeats": cfg.repeats, "seed": cfg.seed,
            "fit": "pool-adjacent-violators, linear interpolation, linear extension"}
    model = CostModel(curves, model_cost, channel_cost, tuple(cfg.degradation), cfg.degradation_mode, meta)
    return model, rows


def write_raw_csv(rows, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    cols = ["kind", "stage", "tier", "queue_length", "p", "n", "cores", "qps", "cost"]
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if isinstance(r[k], float) else r[k]) for k in cols})
    tmp.replace(path)


def cost_table(env: PipelineEnv, model: CostModel, ctx: Contexts, predictor=None, degradation=0):
    """Estimated cost of every joint action for every request, shape (M, |A|)."""
    m = len(ctx)
    rep = ctx.repeat(env.n_joint)
    acts = np.tile(env.joint_actions, (m, 1))
    if predictor is None:
        sizes = env.realized_sizes(rep, acts)
    else:
        sizes = predictor.predict(env, rep, acts)
    return estimate_cost_from_sizes(env, model, rep.tier, acts, sizes, degradation).reshape(m, env.n_joint)
