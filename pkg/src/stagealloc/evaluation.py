"""Revenue simulation: a ground-truth revenue model fit on all logged data,
per-action quotas from the test split, and Return% of a method's Q table."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from stagealloc import allocator, metrics
from stagealloc.envsim import LoggedDataset, PipelineEnv
from stagealloc.nncore import MLPRegressor


def action_onehots(env: PipelineEnv, joint_idx):
    acts = env.joint_actions[np.asarray(joint_idx)]
    return np.concatenate([np.eye(n)[acts[..., g]] for g, n in enumerate(env.action_counts)], axis=-1)


def request_action_features(env: PipelineEnv, state, joint_idx):
    return np.concatenate([state, action_onehots(env, joint_idx)], axis=-1)


def full_table_features(env: PipelineEnv, state):
    """(M * |A|, D) rows: every request crossed with every joint action."""
    m = len(state)
    st = np.repeat(state, env.n_joint, axis=0)
    j = np.tile(np.arange(env.n_joint), m)
    return request_action_features(env, st, j)


@dataclass
class GroundTruthConfig:
    n_models: int = 5
    hidden: tuple = (128, 128)
    iterations: int = 3000
    batch: int = 256
    lr: float = 3e-3
    seed: int = 0


class GroundTruthModel:
    """Seed ensemble of revenue regressors on (state, joint action)."""

    def __init__(self, models):
        self.models = list(models)

    @classmethod
    def fit(cls, env: PipelineEnv, ds: LoggedDataset, cfg: GroundTruthConfig | None = None):
        cfg = cfg or GroundTruthConfig()
        x = request_action_features(env, env.state_features(ds.contexts), env.joint_index(ds.actions))
        models = [MLPRegressor(x.shape[1], cfg.hidden, 1, seed=cfg.seed * 1000 + i)
                  .fit(x, ds.reward, cfg.iterations, cfg.batch, cfg.lr)
                  for i in range(cfg.n_models)]
        return cls(models)

    def predict(self, x):
        return np.mean([m.predict(x)[:, 0] for m in self.models], axis=0)

    def q_table(self, env: PipelineEnv, ctx):
        st = env.state_features(ctx)
        return self.predict(full_table_features(env, st)).reshape(len(ctx), env.n_joint)

    def to_arrays(self):
        out = {}
        for i, m in enumerate(self.models):
            out.update(m.to_arrays(f"gt{i}/"))
        return out

    @classmethod
    def from_arrays(cls, arrays):
        n = len({k.split("/")[0] for k in arrays if k.startswith("gt")})
        return cls([MLPRegressor.from_arrays(arrays, f"gt{i}/") for i in range(n)])


class RevenueSimulator:
    """Frozen evaluation protocol on the test split: ground-truth table,
    logged-frequency quota and the ground-truth model's own plan."""

    def __init__(self, env: PipelineEnv, ds: LoggedDataset, gt: GroundTruthModel):
        self.env = env
        self.test = ds.split("test")
        self.contexts = self.test.contexts
        self.gt_table = gt.q_table(env, self.contexts)
        self.quota = allocator.action_quota(env.joint_index(self.test.actions), env.n_joint)
        self.gt_plan = allocator.greedy_allocate(self.gt_table, self.quota)

    def latent_table(self):
        ctx = self.contexts.repeat(self.env.n_joint)
        acts = np.tile(self.env.joint_actions, (len(self.contexts), 1))
        return self.env.latent_revenue(ctx, acts).reshape(len(self.contexts), self.env.n_joint)

    def ground_truth_rs(self):
        return metrics.spearman_rs(self.gt_table.ravel(), self.latent_table().ravel())

    def plan(self, q_table):
        return allocator.greedy_allocate(q_table, self.quota)

    def return_percent(self, q_table):
        return allocator.return_percent(self.plan(q_table), self.gt_table, self.gt_plan)
