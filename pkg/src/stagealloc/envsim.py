"""Synthetic three-stage recommender pipeline.

Stages run in order retrieval -> pre-ranking -> ranking. Each stage picks one
discrete action; the request's revenue is only revealed after the last stage.
A frozen random network (seeded per environment) supplies each request's
latent value, and the revenue model is

    latent(s, a) = v(s) * prod_g (1 - exp(-kappa_g(s) * effort_g(a_g)))

so upstream effort scales every downstream marginal gain. Realized result
sizes (candidate pool after retrieval, truncated queues after each later stage)
drive computation cost and are what downstream agents get to observe.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

STAGE_NAMES = ("retrieval", "preranking", "ranking")
SCHEMA_VERSION = 1


@dataclass
class EnvConfig:
    feature_dim: int = 16
    n_tiers: int = 3
    n_platforms: int = 2
    tier_probs: tuple = (0.6, 0.3, 0.1)
    tier_multipliers: tuple = (1.0, 1.8, 3.0)
    platform_activity: tuple = (1.0, 0.8)
    # retrieval: action i activates the first i+1 channels
    channel_yields: tuple = (120, 60, 40, 30)
    channel_quality: tuple = (1.0, 0.6, 0.4, 0.3)
    prerank_lengths: tuple = (32, 64, 128)
    rank_levels: tuple = (0, 1)
    rank_lengths: tuple = (16, 32)
    kappa: tuple = (0.9, 0.8, 0.7)
    kappa_spread: float = 0.4
    activity_spread: float = 0.25
    revenue_scale: float = 12.0
    diurnal_value: float = 0.15
    noise_frac: float = 0.1
    # hidden per-request costs (core-units): queue cost = base * tier * (L/64)^exp
    queue_cost_base: tuple = (0.010, 0.030, 0.080)
    queue_cost_exponent: float = 1.3
    tier_cost: tuple = (1.0, 1.1, 1.25)
    model_cost: tuple = (0.0, 0.05)
    channel_cost: tuple = (0.015, 0.010, 0.008, 0.006)
    day_seconds: int = 86400
    seed: int = 0

    @classmethod
    def mini(cls, **kw):
        """2x2x2 joint action space for brute-force checks."""
        base = dict(channel_yields=(120, 60), channel_quality=(1.0, 0.6), channel_cost=(0.015, 0.010),
                    prerank_lengths=(32, 64), rank_levels=(0,), rank_lengths=(16, 32))
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        fields = cls.__dataclass_fields__
        unknown = set(d) - set(fields)
        if unknown:
            raise ValueError(f"unknown environment keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class RequestContext:
    user_features: np.ndarray
    value_tier: int
    timestamp: float
    platform_id: int


@dataclass
class Contexts:
    """Column-major batch of request contexts."""

    features: np.ndarray  # (M, d)
    tier: np.ndarray  # (M,) int
    platform: np.ndarray  # (M,) int
    timestamp: np.ndarray  # (M,) float seconds

    def __len__(self):
        return self.features.shape[0]

    def take(self, idx):
        return Contexts(self.features[idx], self.tier[idx], self.platform[idx], self.timestamp[idx])

    def row(self, i) -> RequestContext:
        return RequestContext(self.features[i].copy(), int(self.tier[i]), float(self.timestamp[i]),
                              int(self.platform[i]))

    @classmethod
    def stack(cls, ctxs):
        ctxs = list(ctxs)
        return cls(np.stack([np.asarray(c.user_features, dtype=float) for c in ctxs]),
                   np.array([c.value_tier for c in ctxs], dtype=np.int64),
                   np.array([c.platform_id for c in ctxs], dtype=np.int64),
                   np.array([c.timestamp for c in ctxs], dtype=float))

    def repeat(self, n):
        """Each row repeated ``n`` times consecutively."""
        return Contexts(np.repeat(self.features, n, axis=0), np.repeat(self.tier, n),
                        np.repeat(self.platform, n), np.repeat(self.timestamp, n))


@dataclass
class EpisodeRecord:
    context: RequestContext
    states: np.ndarray  # (T+1, Ds); row T is the terminal state
    observations: np.ndarray  # (T, Do)
    actions: tuple
    result_sizes: tuple
    stage_costs: tuple
    reward: float
    latent: float

    @property
    def step_rewards(self):
        """Per-step rewards: zero everywhere except the terminal step."""
        r = [0.0] * len(self.actions)
        r[-1] = self.reward
        return r


@dataclass
class TrafficProfile:
    base_qps: float = 100.0
    amplitude: float = 0.4
    bursts: tuple = ()  # (start_step, duration_steps, multiplier)
    noise: float = 0.0  # relative std of multiplicative-free additive noise (x base)
    seed: int = 0
    step_seconds: int = 60
    day_seconds: int = 86400
    phase_seconds: float = 0.0

    def expected(self, horizon):
        t = np.arange(horizon)
        sec = t * self.step_seconds
        lam = self.base_qps * (1.0 + self.amplitude * np.sin(2 * np.pi * (sec - self.phase_seconds) / self.day_seconds))
        mult = np.ones(horizon)
        for start, dur, m in self.bursts:
            mult[int(start):int(start) + int(dur)] *= m
        return lam * mult


def generate_traffic(profile: TrafficProfile, horizon: int):
    """Per-step ``(timestamps, request_counts)``; counts are floored at 1."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = np.random.default_rng(profile.seed)
    expected = profile.expected(horizon)
    noise = rng.standard_normal(horizon) * profile.noise * profile.base_qps
    counts = np.maximum(1, np.rint(expected + noise)).astype(np.int64)
    stamps = np.arange(horizon) * profile.step_seconds
    return stamps, counts


class PipelineEnv:
    n_stages = 3

    def __init__(self, cfg: EnvConfig | None = None):
        self.cfg = cfg = cfg or EnvConfig()
        n_ch = len(cfg.channel_yields)
        if not (len(cfg.channel_quality) == len(cfg.channel_cost) == n_ch):
            raise ValueError("channel tables must have equal length")
        self.action_counts = (n_ch, len(cfg.prerank_lengths), len(cfg.rank_levels) * len(cfg.rank_lengths))
        self.joint_actions = np.array(list(itertools.product(*[range(n) for n in self.action_counts])),
                                      dtype=np.int64)
        self.n_joint = len(self.joint_actions)

        self.retrieval_yield = np.cumsum(cfg.channel_yields).astype(float)
        self.rank_table = np.array(list(itertools.product(cfg.rank_levels, cfg.rank_lengths)), dtype=np.int64)
        pl = np.asarray(cfg.prerank_lengths, dtype=float)
        rl = self.rank_table[:, 1].astype(float)
        self.efforts = (
            np.cumsum(cfg.channel_quality).astype(float),
            np.log2(pl / (pl.min() / 2.0)),
            (1.0 + 0.5 * self.rank_table[:, 0]) * np.log2(rl / (min(cfg.rank_lengths) / 2.0)),
        )

        rng = np.random.default_rng([cfg.seed, 7919])
        d = cfg.feature_dim
        self._v_w1 = rng.standard_normal((d, 16)) / math.sqrt(d)
        self._v_w2 = rng.standard_normal(16) / math.sqrt(16)
        self._kappa_dirs = rng.standard_normal((3, d)) / math.sqrt(d)
        act_dir = rng.standard_normal(d)
        self._activity_dir = act_dir / np.linalg.norm(act_dir)

        probe = self.sample_contexts(4096, np.random.default_rng([cfg.seed, 104729]))
        acts = self.joint_actions[np.arange(4096) % self.n_joint]
        self.mean_revenue = float(self.latent_revenue(probe, acts).mean())
        self.noise_sigma = cfg.noise_frac * self.mean_revenue

    # -- dimensions ---------------------------------------------------------

    @property
    def state_dim(self):
        c = self.cfg
        return c.feature_dim + c.n_tiers + c.n_platforms + 2

    @property
    def obs_dim(self):
        return self.state_dim + 2

    def joint_index(self, actions):
        actions = np.asarray(actions)
        idx = np.zeros(actions.shape[:-1], dtype=np.int64)
        for g, n in enumerate(self.action_counts):
            idx = idx * n + actions[..., g]
        return idx

    def validate_action(self, a):
        a = tuple(int(x) for x in a)
        if len(a) != self.n_stages:
            raise ValueError(f"joint action needs {self.n_stages} entries, got {len(a)}")
        for g, (x, n) in enumerate(zip(a, self.action_counts)):
            if not 0 <= x < n:
                raise ValueError(f"stage {g} ({STAGE_NAMES[g]}) action {x} outside [0, {n})")
        return a

    # -- sampling -------------------------------------------------------------

    def sample_contexts(self, n, rng) -> Contexts:
        c = self.cfg
        feats = rng.standard_normal((n, c.feature_dim))
        tier = rng.choice(c.n_tiers, size=n, p=np.asarray(c.tier_probs) / np.sum(c.tier_probs))
        plat = rng.integers(0, c.n_platforms, size=n)
        ts = rng.uniform(0.0, c.day_seconds, size=n)
        return Contexts(feats, tier.astype(np.int64), plat.astype(np.int64), ts)

    # -- latent model ---------------------------------------------------------

    def value(self, ctx: Contexts):
        c = self.cfg
        u = np.tanh(ctx.features @ self._v_w1) @ self._v_w2
        tod = 1.0 + c.diurnal_value * np.sin(2 * np.pi * ctx.timestamp / c.day_seconds)
        return c.revenue_scale * np.asarray(c.tier_multipliers)[ctx.tier] * np.exp(0.5 * u) * tod

    def sensitivity(self, ctx: Contexts):
        """Per-request, per-stage kappa_g(s) > 0, shape (M, 3)."""
        k = np.asarray(self.cfg.kappa)
        return k * np.exp(self.cfg.kappa_spread * np.tanh(ctx.features @ self._kappa_dirs.T))

    def effort(self, actions):
        actions = np.asarray(actions)
        return np.stack([self.efforts[g][actions[..., g]] for g in range(self.n_stages)], axis=-1)

    def latent_revenue(self, ctx: Contexts, actions):
        e = self.effort(actions)
        gain = 1.0 - np.exp(-self.sensitivity(ctx) * e)
        return self.value(ctx) * gain.prod(axis=-1)

    def true_revenue(self, s: RequestContext, a) -> float:
        a = self.validate_action(a)
        return float(self.latent_revenue(Contexts.stack([s]), np.array([a]))[0])

    # -- pipeline mechanics ----------------------------------------------------

    def activity(self, ctx: Contexts):
        c = self.cfg
        base = np.maximum(0.0, 1.0 + c.activity_spread * (ctx.features @ self._activity_dir))
        return base * np.asarray(c.platform_activity)[ctx.platform]

    def stage1_size(self, ctx: Contexts, a1):
        return np.rint(self.activity(ctx) * self.retrieval_yield[np.asarray(a1)])

    def stage2_size(self, pool, a2):
        return np.minimum(np.asarray(self.cfg.prerank_lengths, dtype=float)[np.asarray(a2)], pool)

    def stage3_size(self, kept, a3):
        return np.minimum(self.rank_table[np.asarray(a3), 1].astype(float), kept)

    def realized_sizes(self, ctx: Contexts, actions):
        actions = np.asarray(actions)
        s1 = self.stage1_size(ctx, actions[:, 0])
        s2 = self.stage2_size(s1, actions[:, 1])
        s3 = self.stage3_size(s2, actions[:, 2])
        return np.stack([s1, s2, s3], axis=1)

    def true_queue_cost(self, stage, tier, length):
        c = self.cfg
        return (c.queue_cost_base[stage] * np.asarray(c.tier_cost)[np.asarray(tier)]
                * (np.asarray(length, dtype=float) / 64.0) ** c.queue_cost_exponent)

    def true_stage_costs(self, ctx: Contexts, actions, sizes=None):
        """Hidden ground-truth per-request cost of each stage, shape (M, 3)."""
        actions = np.asarray(actions)
        if sizes is None:
            sizes = self.realized_sizes(ctx, actions)
        c = self.cfg
        ch = np.cumsum(c.channel_cost)[actions[:, 0]]
        model = np.asarray(c.model_cost)[self.rank_table[actions[:, 2], 0]]
        q = np.stack([self.true_queue_cost(g, ctx.tier, sizes[:, g]) for g in range(3)], axis=1)
        q[:, 0] += ch
        q[:, 2] += model
        return q

    # -- encodings --------------------------------------------------------------

    def state_features(self, ctx: Contexts):
        c = self.cfg
        ang = 2 * np.pi * ctx.timestamp / c.day_seconds
        return np.concatenate([
            ctx.features,
            np.eye(c.n_tiers)[ctx.tier],
            np.eye(c.n_platforms)[ctx.platform],
            np.sin(ang)[:, None], np.cos(ang)[:, None],
        ], axis=1)

    def size_summary(self, sizes, stage):
        ref = self.retrieval_yield[-1] * 2.0 if stage == 0 else float(max(self.cfg.prerank_lengths))
        return np.log1p(sizes) / np.log1p(ref)

    def stage_observation(self, state, t, s1=None, s2=None):
        """Observation of the agent acting at step ``t`` (0-based).

        Contains the request encoding plus summaries of the upstream realized
        sizes; slots for stages not yet executed are zero.
        """
        m = state.shape[0]
        up = np.zeros((m, 2))
        if t >= 1:
            up[:, 0] = self.size_summary(s1, 0)
        if t >= 2:
            up[:, 1] = self.size_summary(s2, 1)
        return np.concatenate([state, up], axis=1)

    def observations(self, ctx: Contexts, actions, sizes=None):
        """All per-step observations, shape (M, T, obs_dim)."""
        if sizes is None:
            sizes = self.realized_sizes(ctx, actions)
        st = self.state_features(ctx)
        return np.stack([self.stage_observation(st, t, sizes[:, 0], sizes[:, 1]) for t in range(3)], axis=1)

    # -- episodes ------------------------------------------------------------------

    def run_episode(self, s: RequestContext, a, seed=0) -> EpisodeRecord:
        a = self.validate_action(a)
        ctx = Contexts.stack([s])
        acts = np.array([a])
        sizes = self.realized_sizes(ctx, acts)
        obs = self.observations(ctx, acts, sizes)[0]
        st = self.state_features(ctx)[0]
        states = np.stack([st] * self.n_stages + [st])
        latent = float(self.latent_revenue(ctx, acts)[0])
        rng = np.random.default_rng(seed)
        reward = latent + self.noise_sigma * rng.standard_normal()
        costs = self.true_stage_costs(ctx, acts, sizes)[0]
        return EpisodeRecord(s, states, obs, a, tuple(float(x) for x in sizes[0]),
                             tuple(float(x) for x in costs), float(reward), latent)


# --------------------------------------------------------------------------
# logged datasets


@dataclass
class LoggedDataset:
    contexts: Contexts
    actions: np.ndarray  # (M, 3)
    sizes: np.ndarray  # (M, 3)
    costs: np.ndarray  # (M, 3)
    reward: np.ndarray  # (M,)
    latent: np.ndarray  # (M,)
    is_train: np.ndarray  # (M,) bool
    policy: dict = field(default_factory=dict)
    env_config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.reward)

    def subset(self, idx):
        return LoggedDataset(self.contexts.take(idx), self.actions[idx], self.sizes[idx], self.costs[idx],
                             self.reward[idx], self.latent[idx], self.is_train[idx], dict(self.policy),
                             dict(self.env_config))

    def split(self, name):
        mask = self.is_train if name == "train" else ~self.is_train
        return self.subset(np.flatnonzero(mask))

    def content_hash(self):
        h = hashlib.sha256()
        for arr in (self.contexts.features, self.contexts.tier, self.contexts.platform,
                    self.contexts.timestamp, self.actions, self.sizes, self.costs, self.reward,
                    self.latent, self.is_train):
            a = np.ascontiguousarray(arr)
            h.update(str(a.dtype).encode())
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
        h.update(json.dumps(self.policy, sort_keys=True).encode())
        return h.hexdigest()

    def summary(self, env: PipelineEnv):
        jidx = env.joint_index(self.actions)
        marg = [np.bincount(self.actions[:, g], minlength=n).tolist() for g, n in enumerate(env.action_counts)]
        return {
            "n": int(len(self)),
            "n_train": int(self.is_train.sum()),
            "n_test": int((~self.is_train).sum()),
            "action_marginals": marg,
            "joint_min_count": int(np.bincount(jidx, minlength=env.n_joint).min()),
            "reward_mean": float(self.reward.mean()),
            "reward_std": float(self.reward.std()),
        }


def logging_probabilities(env: PipelineEnv, ctx: Contexts, policy, epsilon=0.3):
    """Joint-action probabilities of the logging policy, shape (M, |A|)."""
    m = len(ctx)
    uni = np.full((m, env.n_joint), 1.0 / env.n_joint)
    if policy == "uniform_random":
        return uni
    if policy == "epsilon_mixture":
        # heuristic: higher value tiers get more effort at every stage
        frac = ctx.tier / max(env.cfg.n_tiers - 1, 1)
        greedy = np.zeros((m, env.n_joint))
        choice = [np.rint(frac * (n - 1)).astype(np.int64) for n in env.action_counts]
        greedy[np.arange(m), env.joint_index(np.stack(choice, axis=1))] = 1.0
        return epsilon * uni + (1.0 - epsilon) * greedy
    raise ValueError(f"unknown logging policy {policy!r}")


def build_logged_dataset(env: PipelineEnv, policy="uniform_random", n_requests=24000, seed=0,
                         train_frac=0.8, epsilon=0.3) -> LoggedDataset:
    if n_requests < 1:
        raise ValueError("n_requests must be >= 1")
    if policy == "epsilon_mixture" and not epsilon > 0.0:
        raise ValueError("epsilon_mixture with epsilon=0 has zero support on most joint actions; "
                         "offline Q-learning needs every joint action to be loggable")
    rng = np.random.default_rng([seed, 1])
    ctx = env.sample_contexts(n_requests, rng)
    probs = logging_probabilities(env, ctx, policy, epsilon)
    if np.any(probs.min(axis=1) <= 0.0):
        raise ValueError("logging policy assigns zero probability to some joint action")
    u = rng.random(n_requests)[:, None]
    jidx = np.minimum((u > np.cumsum(probs, axis=1)).sum(axis=1), env.n_joint - 1)
    actions = env.joint_actions[jidx]
    sizes = env.realized_sizes(ctx, actions)
    costs = env.true_stage_costs(ctx, actions, sizes)
    latent = env.latent_revenue(ctx, actions)
    reward = latent + env.noise_sigma * rng.standard_normal(n_requests)
    n_train = int(round(train_frac * n_requests))
    is_train = np.zeros(n_requests, dtype=bool)
    is_train[rng.permutation(n_requests)[:n_train]] = True
    pol = {"name": policy, "seed": int(seed)}
    if policy == "epsilon_mixture":
        pol["epsilon"] = float(epsilon)
    return LoggedDataset(ctx, actions, sizes, costs, reward, latent, is_train, pol, env.cfg.to_dict())


# --------------------------------------------------------------------------
# newline-delimited JSON storage


def _episode_rows(ds: LoggedDataset, env: PipelineEnv):
    obs = env.observations(ds.contexts, ds.actions, ds.sizes)
    for i in range(len(ds)):
        yield {
            "schema_version": SCHEMA_VERSION,
            "request_id": i,
            "split": "train" if ds.is_train[i] else "test",
            "context": {
                "user_features": ds.contexts.features[i].tolist(),
                "value_tier": int(ds.contexts.tier[i]),
                "platform_id": int(ds.contexts.platform[i]),
                "timestamp": float(ds.contexts.timestamp[i]),
            },
            "steps": [
                {"t": t + 1, "stage": STAGE_NAMES[t], "action": int(ds.actions[i, t]),
                 "observation": obs[i, t].tolist(), "result_size": float(ds.sizes[i, t]),
                 "cost": float(ds.costs[i, t])}
                for t in range(3)
            ],
            "reward": float(ds.reward[i]),
            "latent_revenue": float(ds.latent[i]),
        }


def write_jsonl(ds: LoggedDataset, env: PipelineEnv, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(json.dumps({"schema_version": SCHEMA_VERSION, "header": True, "policy": ds.policy,
                             "env_config": ds.env_config}, sort_keys=True) + "\n")
        for row in _episode_rows(ds, env):
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    tmp.replace(path)


def read_jsonl(path) -> LoggedDataset:
    feats, tier, plat, ts, acts, sizes, costs, rew, lat, train = ([] for _ in range(10))
    header = {}
    with open(path) as fh:
        for line in fh:
            row = json.loads(line)
            if row.get("schema_version") != SCHEMA_VERSION:
                raise ValueError(f"unsupported schema version {row.get('schema_version')!r} in {path}")
            if row.get("header"):
                header = row
                continue
            c = row["context"]
            feats.append(c["user_features"])
            tier.append(c["value_tier"])
            plat.append(c["platform_id"])
            ts.append(c["timestamp"])
            acts.append([s["action"] for s in row["steps"]])
            sizes.append([s["result_size"] for s in row["steps"]])
            costs.append([s["cost"] for s in row["steps"]])
            rew.append(row["reward"])
            lat.append(row["latent_revenue"])
            train.append(row["split"] == "train")
    ctx = Contexts(np.array(feats, dtype=float), np.array(tier, dtype=np.int64),
                   np.array(plat, dtype=np.int64), np.array(ts, dtype=float))
    return LoggedDataset(ctx, np.array(acts, dtype=np.int64), np.array(sizes, dtype=float),
                         np.array(costs, dtype=float), np.array(rew, dtype=float), np.array(lat, dtype=float),
                         np.array(train, dtype=bool), header.get("policy", {}), header.get("env_config", {}))
