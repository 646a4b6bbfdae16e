"""Reference learners trained on the same logged data and evaluated by the
same protocol as the recurrent mixer.

Single-agent methods score the flattened joint action space from the state.
Multi-agent methods keep one feed-forward agent per stage and train them end
to end through an additive or monotone mixer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from stagealloc import mixer, nncore
from stagealloc.awrq import pick
from stagealloc.envsim import LoggedDataset, PipelineEnv
from stagealloc.evaluation import request_action_features
from stagealloc.mixer import MixerConfig
from stagealloc.training import (AdamGroup, Learner, TrainerConfig, TransitionTable, params_from_arrays,
                                 params_to_arrays, run_training)

SINGLE_AGENT = ("dqn", "ddqn", "drqn", "avg_ensemble", "rem")
MULTI_AGENT = ("vdn", "qmix", "weighted_qmix")
METHODS = SINGLE_AGENT + MULTI_AGENT


@dataclass
class BaselineConfig:
    hidden: tuple = (64, 32)
    gru_hidden: int = 32
    n_heads: int = 5  # avg_ensemble and rem only
    gamma: float = 0.9
    tau: int = 100
    joint_cap: int = 4096
    weighting: str = "central"  # weighted_qmix: "central" or "optimistic"
    wq_alpha: float = 0.1
    mix_hidden: int = 32
    hyper_hidden: int = 64

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.weighting not in ("central", "optimistic"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if not 0.0 < self.wq_alpha <= 1.0:
            raise ValueError("wq_alpha must lie in (0, 1]")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def dqn_target(reward, gamma, q_target_next, terminal):
    """r + gamma * max_a Q_target(s', a) (bootstrap dropped at terminal rows)."""
    boot = np.where(terminal, 0.0, q_target_next.max(axis=-1))
    return reward + gamma * boot


def ddqn_target(reward, gamma, q_online_next, q_target_next, terminal):
    """r + gamma * Q_target(s', argmax_a Q_online(s', a))."""
    a = np.argmax(q_online_next, axis=-1)
    boot = np.take_along_axis(q_target_next, a[..., None], axis=-1)[..., 0]
    return reward + gamma * np.where(terminal, 0.0, boot)


def rem_mixture(rng, k):
    """Convex combination drawn uniformly from the simplex."""
    return rng.dirichlet(np.ones(k))


# --------------------------------------------------------------------------
# single agent over the flattened joint action space


class FlatQ(Learner):
    def __init__(self, env: PipelineEnv, method, cfg: BaselineConfig, lr=1e-3, seed=0):
        if method not in SINGLE_AGENT:
            raise ValueError(f"{method!r} is not a single-agent method")
        if env.n_joint > cfg.joint_cap:
            raise ValueError(f"joint action space {env.n_joint} exceeds the flattened-mode cap {cfg.joint_cap}")
        self.tag, self.cfg, self.method = method, cfg, method
        self.k = cfg.n_heads if method in ("avg_ensemble", "rem") else 1
        self.recurrent = method == "drqn"
        rng = np.random.default_rng([seed, 1])
        lead = (self.k,)
        d_in = env.state_dim
        p = {}
        if self.recurrent:
            p.update(nncore.init_gru(rng, "gru/", d_in, cfg.gru_hidden, lead))
            d_in = cfg.gru_hidden
        p.update(nncore.init_mlp(rng, "mlp/", (d_in,) + cfg.hidden + (env.n_joint,), lead))
        self.params = p
        self.target = {k: v.copy() for k, v in p.items()}
        self.opt = AdamGroup(["q"], lr)

    @property
    def n_layers(self):
        return len(self.cfg.hidden) + 1

    def forward(self, x, params=None):
        params = self.params if params is None else params
        gcache = None
        h = x
        if self.recurrent:
            h0 = np.zeros((self.k, len(x), self.cfg.gru_hidden))
            h, gcache = nncore.gru_step(x, h0, nncore.gru_params(params, "gru/"))
        q, mcaches = nncore.mlp_forward(params, "mlp/", h, self.n_layers)
        return q, (gcache, mcaches)

    def backward(self, dq, cache):
        gcache, mcaches = cache
        grads = {}
        dh = nncore.mlp_backward(self.params, "mlp/", dq, mcaches, grads)
        if gcache is not None:
            g, _, _ = nncore.gru_backward(dh, gcache)
            grads.update({f"gru/{k}": v for k, v in g.items()})
        return grads

    def td_target(self, reward, x_next, terminal):
        if np.all(terminal):
            return np.asarray(reward, dtype=float)
        q_tgt, _ = self.forward(x_next, self.target)
        q_tgt = q_tgt.mean(axis=0)
        if self.method == "ddqn":
            q_on, _ = self.forward(x_next)
            return ddqn_target(reward, self.cfg.gamma, q_on.mean(axis=0), q_tgt, terminal)
        return dqn_target(reward, self.cfg.gamma, q_tgt, terminal)

    def step(self, batch, rng):
        x, a, R = batch["state"], batch["joint"], batch["reward"]
        # one decision per request: every transition is terminal
        y = self.td_target(R, None, np.ones(len(R), dtype=bool))
        q, cache = self.forward(x)
        qa = pick(q, a)  # (K, B)
        if self.method == "rem":
            alpha = rem_mixture(rng, self.k)
            err = alpha @ qa - y
            dqa = (2.0 / len(y)) * alpha[:, None] * err[None, :]
            loss = float(np.mean(err * err))
        else:
            err = qa - y
            dqa = (2.0 / (len(y) * self.k)) * err
            loss = float(np.mean(err * err))
        dq = np.zeros_like(q)
        np.put_along_axis(dq, a[None, :, None], dqa[..., None], axis=-1)
        grads = self.backward(dq, cache)
        gn = nncore.grad_norm(grads)
        self.params = self.opt.update("q", self.params, grads)
        return {"loss": loss, "grad_norm": gn}

    def sync(self, iteration):
        if iteration % self.cfg.tau == 0:
            self.target = {k: v.copy() for k, v in self.params.items()}

    def q_table(self, env, ctx):
        q, _ = self.forward(env.state_features(ctx))
        return q.mean(axis=0)

    def arrays(self):
        out = params_to_arrays(self.params, "online/")
        out.update(params_to_arrays(self.target, "target/"))
        out.update(self.opt.to_arrays())
        return out

    def load(self, arrays, meta):
        self.params = params_from_arrays(arrays, "online/")
        self.target = params_from_arrays(arrays, "target/")
        self.opt.restore(meta["adam"], arrays)

    def meta(self):
        return {"adam": self.opt.meta(), "method": self.method, "config": self.cfg.to_dict()}


# --------------------------------------------------------------------------
# per-stage agents with a mixer, trained end to end on the episode return


class MultiAgentQ(Learner):
    def __init__(self, env: PipelineEnv, method, cfg: BaselineConfig, lr=1e-3, seed=0):
        if method not in MULTI_AGENT:
            raise ValueError(f"{method!r} is not a multi-agent method")
        self.tag, self.cfg, self.method = method, cfg, method
        self.counts = env.action_counts
        self.n_agents = env.n_stages
        self.joint_actions = env.joint_actions
        rng = np.random.default_rng([seed, 1])
        self.params = {}
        for g, n in enumerate(self.counts):
            self.params.update(nncore.init_mlp(rng, f"agent{g}/", (env.obs_dim,) + cfg.hidden + (n,)))
        names = ["agents"]
        self.mcfg = MixerConfig(cfg.mix_hidden, cfg.hyper_hidden, transform="abs", vgca=False)
        if method != "vdn":
            self.params.update(mixer.init_hypernet(rng, env.state_dim, self.n_agents, self.mcfg))
        if method == "weighted_qmix":
            n_feat = env.state_dim + sum(self.counts)
            self.params.update(nncore.init_mlp(rng, "qstar/", (n_feat,) + cfg.hidden + (1,)))
            names.append("qstar")
        self.opt = AdamGroup(names, lr)
        self._env = env

    @property
    def n_layers(self):
        return len(self.cfg.hidden) + 1

    def agent_forward(self, g, o):
        return nncore.mlp_forward(self.params, f"agent{g}/", o, self.n_layers)

    def _mix(self, q, s):
        if self.method == "vdn":
            return q.sum(axis=-1)
        return mixer.mix_at(self.params, q, s, "abs")

    def joint_values(self, state, up1, up2):
        def stage(t, o, carry):
            q, _ = self.agent_forward(t, o)
            return q, None
        q = mixer.tree_stage_values(state, up1, up2, self.counts, stage)
        return self._mix(q, state)

    def _qstar(self, state, joint):
        x = request_action_features(self._env, state, joint)
        out, caches = nncore.mlp_forward(self.params, "qstar/", x, self.n_layers)
        return out[:, 0], caches

    def step(self, batch, rng):
        obs, acts, R, s = batch["obs"], batch["actions"], batch["reward"], batch["state"]
        B = len(R)
        outs = [self.agent_forward(g, obs[:, g]) for g in range(self.n_agents)]
        q = np.stack([pick(o[None], acts[:, g])[0] for g, (o, _) in enumerate(outs)], axis=1)
        grads = {}
        row = {}
        if self.method == "vdn":
            qtot = q.sum(axis=1)
        else:
            w, hcache = mixer.hypernet_forward(self.params, s, self.n_agents, "abs")
            qtot = mixer.mix(q, w)
        err = qtot - R
        weights = np.ones(B)
        if self.method == "weighted_qmix":
            qs, qs_cache = self._qstar(s, batch["joint"])
            serr = qs - R
            mlp_grads = {}
            nncore.mlp_backward(self.params, "qstar/", (2.0 / B * serr)[:, None], qs_cache, mlp_grads)
            self.params = self.opt.update("qstar", self.params, mlp_grads)
            row["loss_qstar"] = float(np.mean(serr * serr))
            if self.cfg.weighting == "optimistic":
                weights = np.where(qtot < R, 1.0, self.cfg.wq_alpha)
            else:
                best = np.argmax(self.joint_values(s, batch["up1"], batch["up2"]), axis=1)
                q_best, _ = self._qstar(s, best)
                weights = np.where((R > q_best) | (best == batch["joint"]), 1.0, self.cfg.wq_alpha)
        dqtot = 2.0 * weights * err / B
        if self.method == "vdn":
            dq = np.broadcast_to(dqtot[:, None], q.shape)
        else:
            dq, dW1, db1, dW2, db2 = mixer.mix_backward(dqtot, q, w)
            grads.update(mixer.hypernet_backward(self.params, dW1, db1, dW2, db2, hcache))
        for g, (o, caches) in enumerate(outs):
            d = np.zeros_like(o)
            d[np.arange(B), acts[:, g]] = dq[:, g]
            nncore.mlp_backward(self.params, f"agent{g}/", d, caches, grads)
        gn = nncore.grad_norm(grads)
        self.params = self.opt.update("agents", self.params, grads)
        row["loss"] = float(np.mean(weights * err * err))
        row["grad_norm"] = gn
        return row

    def q_table(self, env, ctx):
        return self.joint_values(env.state_features(ctx), *mixer.size_tree(env, ctx))

    def arrays(self):
        out = params_to_arrays(self.params, "online/")
        out.update(self.opt.to_arrays())
        return out

    def load(self, arrays, meta):
        self.params = params_from_arrays(arrays, "online/")
        self.opt.restore(meta["adam"], arrays)

    def meta(self):
        return {"adam": self.opt.meta(), "method": self.method, "config": self.cfg.to_dict()}


def make_learner(env, method, cfg: BaselineConfig | None = None, lr=1e-3, seed=0):
    cfg = cfg or BaselineConfig()
    if method in SINGLE_AGENT:
        return FlatQ(env, method, cfg, lr, seed)
    if method in MULTI_AGENT:
        return MultiAgentQ(env, method, cfg, lr, seed)
    raise ValueError(f"unknown baseline {method!r}; choose from {', '.join(METHODS)}")


def train(env: PipelineEnv, ds: LoggedDataset, method, cfg: BaselineConfig | None = None,
          tcfg: TrainerConfig | None = None, evaluator=None, checkpoint=None, resume=False, stop_at=None):
    tcfg = tcfg or TrainerConfig()
    model = make_learner(env, method, cfg, tcfg.lr, tcfg.seed)
    table = TransitionTable.from_dataset(env, ds.split("train"))
    result = run_training(model, table, tcfg, evaluator, checkpoint, resume, stop_at)
    return model, result
