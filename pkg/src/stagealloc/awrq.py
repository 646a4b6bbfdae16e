"""Per-stage recurrent Q ensembles with loss-proportional head weighting.

Every agent holds K independent GRU+MLP heads stacked along a leading axis,
so one matmul evaluates all heads. During training the heads are combined
with weights proportional to their current TD loss; at serving time they
are averaged uniformly.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from stagealloc import nncore
from stagealloc.nncore import ShapeError


@dataclass
class AwrqConfig:
    n_heads: int = 5
    hidden: int = 32
    mlp: tuple = (64, 32)
    gamma: float = 0.9
    tau: int = 100
    epsilon: float = 0.05
    dropout: float = 0.0
    adaptive: bool = True
    target_mode: str = "logged"  # "logged" next action, or "max" over next actions

    def __post_init__(self):
        self.mlp = tuple(int(x) for x in self.mlp)
        if self.n_heads < 1:
            raise ValueError("n_heads must be >= 1")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.target_mode not in ("logged", "max"):
            raise ValueError(f"unknown target_mode {self.target_mode!r}")

    def to_dict(self):
        d = asdict(self)
        d["mlp"] = list(self.mlp)
        return d


@dataclass
class QEnsemble:
    agent: int
    obs_dim: int
    n_actions: int
    cfg: AwrqConfig
    params: dict = field(default_factory=dict)
    target: dict = field(default_factory=dict)

    @classmethod
    def create(cls, agent, obs_dim, n_actions, cfg: AwrqConfig, rng):
        lead = (cfg.n_heads,)
        p = nncore.init_gru(rng, "gru/", obs_dim, cfg.hidden, lead)
        p.update(nncore.init_mlp(rng, "mlp/", (cfg.hidden,) + cfg.mlp + (n_actions,), lead))
        e = cls(agent, obs_dim, n_actions, cfg, p)
        e.target = {k: v.copy() for k, v in p.items()}
        return e

    @property
    def n_layers(self):
        return len(self.cfg.mlp) + 1

    def initial_hidden(self, batch):
        return np.zeros((self.cfg.n_heads, batch, self.cfg.hidden))

    def forward(self, o, h_prev=None, params=None, rng=None):
        """All heads at once: ``q`` is (K, B, |A_g|), ``h`` is (K, B, H)."""
        params = self.params if params is None else params
        o = np.asarray(o, dtype=float)
        if o.ndim != 2 or o.shape[1] != self.obs_dim:
            raise ShapeError(f"agent {self.agent} expects observations (B, {self.obs_dim}), got {o.shape}")
        if h_prev is None:
            h_prev = self.initial_hidden(o.shape[0])
        h, gcache = nncore.gru_step(o, h_prev, nncore.gru_params(params, "gru/"))
        q, mcaches = nncore.mlp_forward(params, "mlp/", h, self.n_layers, self.cfg.dropout, rng)
        return q, h, (gcache, mcaches)

    def backward(self, dq, cache, params=None):
        params = self.params if params is None else params
        gcache, mcaches = cache
        grads = {}
        dh = nncore.mlp_backward(params, "mlp/", dq, mcaches, grads)
        g, _, _ = nncore.gru_backward(dh, gcache)
        grads.update({f"gru/{k}": v for k, v in g.items()})
        return grads

    def to_arrays(self, prefix):
        out = {f"{prefix}online/{k}": v for k, v in self.params.items()}
        out.update({f"{prefix}target/{k}": v for k, v in self.target.items()})
        return out

    def load_arrays(self, arrays, prefix):
        self.params = {k[len(prefix) + 7:]: v.copy() for k, v in arrays.items() if k.startswith(f"{prefix}online/")}
        self.target = {k[len(prefix) + 7:]: v.copy() for k, v in arrays.items() if k.startswith(f"{prefix}target/")}


def agent_forward(e: QEnsemble, o, h_prev=None):
    q, h, _ = e.forward(o, h_prev)
    return q, h


def head_td_loss(r, gamma, q_next_target, q_current, terminal=False):
    target = r if terminal else r + gamma * q_next_target
    return (target - q_current) ** 2


def adaptive_weights(losses):
    losses = np.asarray(losses, dtype=float)
    if losses.ndim != 1 or losses.size == 0:
        raise ValueError("losses must be a non-empty vector")
    if np.any(losses < 0) or not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite and non-negative")
    total = losses.sum()
    if total == 0.0:
        return np.full(losses.size, 1.0 / losses.size)
    eta = losses / total
    return eta / eta.sum()


def uniform_weights(k):
    return np.full(k, 1.0 / k)


def agent_q(e: QEnsemble, o, a, eta, h_prev=None):
    """Sum_k eta_k Q^k(o, a) for each row; ``a`` holds one action per row."""
    q, _ = agent_forward(e, o, h_prev)
    a = np.asarray(a)
    if np.any(a < 0) or np.any(a >= e.n_actions):
        raise ValueError(f"action index outside [0, {e.n_actions})")
    qa = np.take_along_axis(q, np.broadcast_to(a, q.shape[1:2])[None, :, None], axis=-1)[..., 0]
    return np.tensordot(np.asarray(eta, dtype=float), qa, axes=(0, 0))


def serve_q(e: QEnsemble, o, h_prev=None):
    """Uniform mean over heads; returns ``(q, h)`` so callers can chain stages."""
    q, h = agent_forward(e, o, h_prev)
    return q.mean(axis=0), h


def epsilon_greedy(q_values, epsilon, rng):
    q = np.asarray(q_values, dtype=float)
    if q.size == 0:
        raise ValueError("empty action set")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


def sync_targets(e: QEnsemble, iteration, tau) -> bool:
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if iteration % tau != 0:
        return False
    e.target = {k: v.copy() for k, v in e.params.items()}
    return True


def pick(q, a):
    """Select per-row actions from a (K, B, A) tensor -> (K, B)."""
    return np.take_along_axis(q, a[None, :, None], axis=-1)[..., 0]


@dataclass
class HeadUpdate:
    losses: np.ndarray  # (K,)
    eta: np.ndarray  # (K,)
    q_taken: np.ndarray  # (K, B)
    grads: dict
    hidden: np.ndarray  # (K, B, H)


def head_update(e: QEnsemble, o, h_prev, a, target, rng=None, adaptive=True) -> HeadUpdate:
    """Per-head TD losses against ``target`` (K, B) and the gradient of
    sum_k eta_k L_k with eta held constant."""
    q, h, cache = e.forward(o, h_prev, rng=rng)
    qa = pick(q, a)
    err = qa - target
    losses = np.mean(err * err, axis=1)
    eta = adaptive_weights(losses) if adaptive else uniform_weights(len(losses))
    dq = np.zeros_like(q)
    np.put_along_axis(dq, a[None, :, None], (2.0 / len(a)) * eta[:, None, None] * err[..., None], axis=-1)
    return HeadUpdate(losses, eta, qa, e.backward(dq, cache), h)


def write_training_log(rows, path):
    """Rows of dicts with scalar or list values; lists are joined by ';'."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if not rows:
        tmp.write_text("")
        tmp.replace(path)
        return
    keys = list(rows[0])
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([";".join(repr(float(x)) for x in v) if isinstance(v, (list, tuple, np.ndarray))
                        else (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for v in (r[k] for k in keys)])
    tmp.replace(path)
