"""Monotone value mixing with state-conditioned weights, variance-guided
reward scaling, and the joint offline trainer for recurrent stage agents.

The hypernetwork maps a state to the weights of a two-layer mixer::

    Q_tot = ReLU(q @ W1 + b1) @ W2 + b2,   W_i = transform(raw W_i)

With ``transform="softplus"`` (or ``"abs"``) every mixing weight is
non-negative, so ``Q_tot`` is non-decreasing in each agent value.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from stagealloc import awrq, nncore
from stagealloc.awrq import AwrqConfig, QEnsemble
from stagealloc.envsim import LoggedDataset, PipelineEnv
from stagealloc.nncore import ShapeError
from stagealloc.training import (AdamGroup, Learner, TrainerConfig, TransitionTable, params_from_arrays,
                                 params_to_arrays, run_training)

TRANSFORMS = ("softplus", "abs", "none")


def weight_transform(raw, kind):
    if kind == "softplus":
        return nncore.softplus(raw)
    if kind == "abs":
        return np.abs(raw)
    if kind == "none":
        return raw
    raise ValueError(f"unknown weight transform {kind!r}")


def weight_transform_grad(raw, kind):
    if kind == "softplus":
        return nncore.sigmoid(raw)
    if kind == "abs":
        return np.sign(raw)
    return np.ones_like(raw)


def inverse_transform(value, kind):
    if kind == "softplus":
        return math.log(math.expm1(value))
    return value


@dataclass
class MixerConfig:
    mix_hidden: int = 32
    hyper_hidden: int = 64
    transform: str = "softplus"
    vgca: bool = True
    agent_mix_grad: float = 0.0  # >0 also routes the joint loss into the agents

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown weight transform {self.transform!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class MixerWeights:
    W1: np.ndarray  # (B, n, H), post-transform
    b1: np.ndarray  # (B, H)
    W2: np.ndarray  # (B, H), post-transform
    b2: np.ndarray  # (B,)


def init_hypernet(rng, state_dim, n_agents, cfg: MixerConfig, prefix="hyp/"):
    """Trunk plus four linear heads. Head output biases start where the
    transformed weights average the agents (W1 = 1/n, W2 = 1/H)."""
    hh, hm = cfg.hyper_hidden, cfg.mix_hidden
    g = nncore.glorot_uniform
    return {
        f"{prefix}W0": g(rng, state_dim, hh), f"{prefix}b0": np.zeros(hh),
        f"{prefix}Aw1": 0.1 * g(rng, hh, n_agents * hm),
        f"{prefix}cw1": np.full(n_agents * hm, inverse_transform(1.0 / n_agents, cfg.transform)),
        f"{prefix}Ab1": 0.1 * g(rng, hh, hm), f"{prefix}cb1": np.zeros(hm),
        f"{prefix}Aw2": 0.1 * g(rng, hh, hm),
        f"{prefix}cw2": np.full(hm, inverse_transform(1.0 / hm, cfg.transform)),
        f"{prefix}Ab2": 0.1 * g(rng, hh, 1), f"{prefix}cb2": np.zeros(1),
    }


def hypernet_forward(params, s, n_agents, transform="softplus", prefix="hyp/"):
    """Returns ``(MixerWeights, cache)`` for a batch of states (B, Ds)."""
    s = np.asarray(s, dtype=float)
    W0 = params[f"{prefix}W0"]
    if s.ndim != 2 or s.shape[1] != W0.shape[0]:
        raise ShapeError(f"hypernet expects states (B, {W0.shape[0]}), got {s.shape}")
    z_pre = s @ W0 + params[f"{prefix}b0"]
    z = np.maximum(z_pre, 0.0)
    hm = params[f"{prefix}cb1"].shape[0]
    raw1 = (z @ params[f"{prefix}Aw1"] + params[f"{prefix}cw1"]).reshape(-1, n_agents, hm)
    b1 = z @ params[f"{prefix}Ab1"] + params[f"{prefix}cb1"]
    raw2 = z @ params[f"{prefix}Aw2"] + params[f"{prefix}cw2"]
    b2 = (z @ params[f"{prefix}Ab2"] + params[f"{prefix}cb2"])[:, 0]
    w = MixerWeights(weight_transform(raw1, transform), b1, weight_transform(raw2, transform), b2)
    return w, (s, z_pre, z, raw1, raw2, transform, prefix)


def hypernet_backward(params, dW1, db1, dW2, db2, cache):
    """Gradients of the hypernet parameters given gradients on MixerWeights."""
    s, z_pre, z, raw1, raw2, transform, prefix = cache
    dr1 = (dW1 * weight_transform_grad(raw1, transform)).reshape(len(s), -1)
    dr2 = dW2 * weight_transform_grad(raw2, transform)
    db2 = db2[:, None]
    g = {
        f"{prefix}Aw1": z.T @ dr1, f"{prefix}cw1": dr1.sum(0),
        f"{prefix}Ab1": z.T @ db1, f"{prefix}cb1": db1.sum(0),
        f"{prefix}Aw2": z.T @ dr2, f"{prefix}cw2": dr2.sum(0),
        f"{prefix}Ab2": z.T @ db2, f"{prefix}cb2": db2.sum(0),
    }
    dz = (dr1 @ params[f"{prefix}Aw1"].T + db1 @ params[f"{prefix}Ab1"].T
          + dr2 @ params[f"{prefix}Aw2"].T + db2 @ params[f"{prefix}Ab2"].T)
    dz_pre = dz * (z_pre > 0)
    g[f"{prefix}W0"] = s.T @ dz_pre
    g[f"{prefix}b0"] = dz_pre.sum(0)
    return g


def mix(q, w: MixerWeights):
    """Q_tot for agent values ``q`` of shape (B, n), or (B, A, n) to score
    A candidate joint actions per state."""
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != w.W1.shape[1]:
        raise ShapeError(f"expected {w.W1.shape[1]} agent values, got {q.shape[-1]}")
    if q.ndim == 2:
        hid = np.maximum(np.einsum("bn,bnh->bh", q, w.W1) + w.b1, 0.0)
        return np.einsum("bh,bh->b", hid, w.W2) + w.b2
    hid = np.maximum(np.einsum("ban,bnh->bah", q, w.W1) + w.b1[:, None, :], 0.0)
    return np.einsum("bah,bh->ba", hid, w.W2) + w.b2[:, None]


def mix_backward(dqtot, q, w: MixerWeights):
    """Returns ``(dq, dW1, db1, dW2, db2)`` for the (B, n) form."""
    pre = np.einsum("bn,bnh->bh", q, w.W1) + w.b1
    hid = np.maximum(pre, 0.0)
    dW2 = dqtot[:, None] * hid
    db2 = dqtot.copy()
    dpre = dqtot[:, None] * w.W2 * (pre > 0)
    dW1 = q[:, :, None] * dpre[:, None, :]
    dq = np.einsum("bh,bnh->bn", dpre, w.W1)
    return dq, dW1, dpre, dW2, db2


def mix_at(params, q, s, transform="softplus", prefix="hyp/"):
    w, _ = hypernet_forward(params, s, q.shape[-1], transform, prefix)
    return mix(q, w)


# --------------------------------------------------------------------------
# variance-guided reward scaling


def vgca_weights(actions, reward, action_counts):
    """w_t = population variance over the step-t actions of the mean
    terminal reward conditional on that action."""
    actions = np.asarray(actions)
    reward = np.asarray(reward, dtype=float)
    w = np.empty(len(action_counts))
    for t, n in enumerate(action_counts):
        cnt = np.bincount(actions[:, t], minlength=n)
        if np.any(cnt == 0):
            missing = np.flatnonzero(cnt == 0).tolist()
            raise ValueError(f"step {t + 1}: actions {missing} never occur in the dataset, "
                             "so their conditional reward mean is undefined")
        means = np.bincount(actions[:, t], weights=reward, minlength=n) / cnt
        w[t] = means.var()
    return w


def vgca_weights_for(env: PipelineEnv, ds: LoggedDataset):
    return vgca_weights(ds.actions, ds.reward, env.action_counts)


def scaled_rewards(w, reward):
    """r_t = w_t * R, shape (B, T)."""
    return np.asarray(w)[None, :] * np.asarray(reward, dtype=float)[:, None]


# --------------------------------------------------------------------------
# stage-tree evaluation


def size_tree(env: PipelineEnv, ctx):
    """Upstream size summaries for every action prefix: ``up1`` (M, n1) after
    stage 1 and ``up2`` (M, n1, n2) after stage 2."""
    m = len(ctx)
    n1, n2, _ = env.action_counts
    up1 = np.empty((m, n1))
    up2 = np.empty((m, n1, n2))
    for a1 in range(n1):
        s1 = env.stage1_size(ctx, np.full(m, a1))
        up1[:, a1] = env.size_summary(s1, 0)
        for a2 in range(n2):
            up2[:, a1, a2] = env.size_summary(env.stage2_size(s1, np.full(m, a2)), 1)
    return up1, up2


def tree_stage_values(state, up1, up2, counts, stage_fn):
    """Agent values for every joint action, shape (M, |A|, T).

    ``stage_fn(t, obs, carry) -> (values (M, A_t), carry)`` is called once per
    node of the action tree; ``carry`` threads recurrent state downstream.
    """
    m = len(state)
    n1, n2, n3 = counts
    zero = np.zeros((m, 1))
    out = np.empty((m, n1, n2, n3, 3))
    q1, c1 = stage_fn(0, np.concatenate([state, zero, zero], axis=1), None)
    for a1 in range(n1):
        u1 = up1[:, a1:a1 + 1]
        q2, c2 = stage_fn(1, np.concatenate([state, u1, zero], axis=1), c1)
        for a2 in range(n2):
            q3, _ = stage_fn(2, np.concatenate([state, u1, up2[:, a1, a2:a2 + 1]], axis=1), c2)
            out[:, a1, a2, :, 0] = q1[:, a1, None]
            out[:, a1, a2, :, 1] = q2[:, a2, None]
            out[:, a1, a2, :, 2] = q3
    return out.reshape(m, n1 * n2 * n3, 3)


def joint_stage_values(env: PipelineEnv, ctx, stage_fn):
    return tree_stage_values(env.state_features(ctx), *size_tree(env, ctx), env.action_counts, stage_fn)


# --------------------------------------------------------------------------
# joint trainer


class AwrqMixer(Learner):
    """Recurrent K-head stage agents trained on per-head TD losses with
    scaled step rewards, and a hypernetwork mixer trained on the raw
    episode return."""

    tag = "awrq_mixer"

    def __init__(self, env: PipelineEnv, acfg: AwrqConfig, mcfg: MixerConfig, vgca_w, lr=1e-3, seed=0):
        self.acfg, self.mcfg = acfg, mcfg
        self.n_agents = env.n_stages
        self.w = np.asarray(vgca_w, dtype=float) if mcfg.vgca else np.ones(env.n_stages)
        rng = np.random.default_rng([seed, 1])
        self.agents = [QEnsemble.create(g, env.obs_dim, n, acfg, rng) for g, n in enumerate(env.action_counts)]
        self.hyper = init_hypernet(rng, env.state_dim, self.n_agents, mcfg)
        self.hyper_target = {k: v.copy() for k, v in self.hyper.items()}
        self.opt = AdamGroup([f"agent{g}" for g in range(self.n_agents)] + ["hyper"], lr)

    def step(self, batch, rng):
        obs, acts, R, s = batch["obs"], batch["actions"], batch["reward"], batch["state"]
        T = self.n_agents
        gamma = self.acfg.gamma
        r = scaled_rewards(self.w, R)

        # bootstrap values from the target heads, chained along the pipeline
        nxt, h = [], None
        for t, ag in enumerate(self.agents):
            qt, h, _ = ag.forward(obs[:, t], h, params=ag.target)
            nxt.append(awrq.pick(qt, acts[:, t]) if self.acfg.target_mode == "logged" else qt.max(-1))

        row, fwd, q_agents, h = {}, [], [], None
        for t, ag in enumerate(self.agents):
            target = r[:, t] + gamma * nxt[t + 1] if t < T - 1 else np.broadcast_to(r[:, t], nxt[t].shape)
            q, h_new, cache = ag.forward(obs[:, t], h, rng=rng)
            qa = awrq.pick(q, acts[:, t])
            err = qa - target
            losses = np.mean(err * err, axis=1)
            eta = awrq.adaptive_weights(losses) if self.acfg.adaptive else awrq.uniform_weights(len(losses))
            fwd.append((q, cache, err, eta))
            q_agents.append(eta @ qa)
            h = h_new
            row[f"loss_agent{t}"] = float(losses.mean())
            row[f"eta_max_agent{t}"] = float(eta.max())

        q_in = np.stack(q_agents, axis=1)
        w, hcache = hypernet_forward(self.hyper, s, T, self.mcfg.transform)
        err_tot = mix(q_in, w) - R
        dq_in, dW1, db1, dW2, db2 = mix_backward(2.0 * err_tot / len(R), q_in, w)
        grads = hypernet_backward(self.hyper, dW1, db1, dW2, db2, hcache)
        sq = nncore.grad_norm(grads) ** 2

        B = len(R)
        for t, (ag, (q, cache, err, eta)) in enumerate(zip(self.agents, fwd)):
            dqa = (2.0 / B) * eta[:, None] * err
            if self.mcfg.agent_mix_grad:
                dqa = dqa + self.mcfg.agent_mix_grad * eta[:, None] * dq_in[None, :, t]
            dq = np.zeros_like(q)
            np.put_along_axis(dq, acts[None, :, t, None], dqa[..., None], axis=-1)
            agrads = ag.backward(dq, cache)
            sq += nncore.grad_norm(agrads) ** 2
            ag.params = self.opt.update(f"agent{t}", ag.params, agrads)
        self.hyper = self.opt.update("hyper", self.hyper, grads)
        row["l_tot"] = float(np.mean(err_tot * err_tot))
        row["grad_norm"] = float(np.sqrt(sq))
        return row

    def sync(self, iteration):
        synced = [awrq.sync_targets(ag, iteration, self.acfg.tau) for ag in self.agents]
        if synced[0]:
            self.hyper_target = {k: v.copy() for k, v in self.hyper.items()}

    def agent_values(self, env, ctx):
        def stage(t, o, h):
            return awrq.serve_q(self.agents[t], o, h)
        return joint_stage_values(env, ctx, stage)

    def q_table(self, env, ctx):
        q = self.agent_values(env, ctx)
        w, _ = hypernet_forward(self.hyper, env.state_features(ctx), self.n_agents, self.mcfg.transform)
        return mix(q, w)

    def arrays(self):
        out = {}
        for g, ag in enumerate(self.agents):
            out.update(ag.to_arrays(f"agent{g}/"))
        out.update(params_to_arrays(self.hyper, "mixer/online/"))
        out.update(params_to_arrays(self.hyper_target, "mixer/target/"))
        out.update(self.opt.to_arrays())
        return out

    def load(self, arrays, meta):
        for g, ag in enumerate(self.agents):
            ag.load_arrays(arrays, f"agent{g}/")
        self.hyper = params_from_arrays(arrays, "mixer/online/")
        self.hyper_target = params_from_arrays(arrays, "mixer/target/")
        self.opt.restore(meta["adam"], arrays)

    def meta(self):
        return {"adam": self.opt.meta(), "awrq": self.acfg.to_dict(), "mixer": self.mcfg.to_dict(),
                "vgca_w": self.w.tolist()}


def train(env: PipelineEnv, ds: LoggedDataset, acfg: AwrqConfig | None = None, mcfg: MixerConfig | None = None,
          tcfg: TrainerConfig | None = None, evaluator=None, checkpoint=None, resume=False, stop_at=None):
    """Offline joint training on the train split. Returns ``(model, result)``."""
    acfg, mcfg, tcfg = acfg or AwrqConfig(), mcfg or MixerConfig(), tcfg or TrainerConfig()
    train_ds = ds.split("train")
    w = vgca_weights_for(env, train_ds)
    model = AwrqMixer(env, acfg, mcfg, w, tcfg.lr, tcfg.seed)
    table = TransitionTable.from_dataset(env, train_ds)
    result = run_training(model, table, tcfg, evaluator, checkpoint, resume, stop_at)
    return model, result
