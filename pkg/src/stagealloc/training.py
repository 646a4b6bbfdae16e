"""Shared offline training loop: minibatch sampling, target syncs, periodic
validation, checkpoint/resume and last-good recovery on divergence."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from stagealloc import nncore
from stagealloc.envsim import LoggedDataset, PipelineEnv


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TransitionTable:
    """Columnar view of logged episodes ready for minibatching."""

    obs: np.ndarray  # (M, T, Do)
    actions: np.ndarray  # (M, T)
    joint: np.ndarray  # (M,)
    reward: np.ndarray  # (M,)
    state: np.ndarray  # (M, Ds)
    up1: np.ndarray  # (M, n1) stage-1 size summary for every stage-1 action
    up2: np.ndarray  # (M, n1, n2) stage-2 size summary for every action prefix

    @classmethod
    def from_dataset(cls, env: PipelineEnv, ds: LoggedDataset):
        from stagealloc.mixer import size_tree

        return cls(env.observations(ds.contexts, ds.actions, ds.sizes), ds.actions.astype(np.int64),
                   env.joint_index(ds.actions), ds.reward.astype(float), env.state_features(ds.contexts),
                   *size_tree(env, ds.contexts))

    def __len__(self):
        return len(self.reward)

    def batch(self, idx):
        return {"obs": self.obs[idx], "actions": self.actions[idx], "joint": self.joint[idx],
                "reward": self.reward[idx], "state": self.state[idx], "up1": self.up1[idx], "up2": self.up2[idx]}


@dataclass
class TrainerConfig:
    iterations: int = 20000
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("iterations >= 0, batch_size >= 1 and lr > 0 required")

    def to_dict(self):
        return asdict(self)


class Learner:
    """Interface the loop drives. Subclasses own their parameters and
    optimizer states."""

    tag = "learner"

    def step(self, batch, rng) -> dict:
        raise NotImplementedError

    def sync(self, iteration) -> None:
        pass

    def arrays(self) -> dict:
        raise NotImplementedError

    def load(self, arrays: dict, meta: dict) -> None:
        raise NotImplementedError

    def meta(self) -> dict:
        return {}

    def q_table(self, env: PipelineEnv, ctx) -> np.ndarray:
        raise NotImplementedError


@dataclass
class TrainResult:
    log: list = field(default_factory=list)
    curve: list = field(default_factory=list)  # (env_steps, validation value)

    @property
    def grad_norms(self):
        return np.array([r["grad_norm"] for r in self.log])


def _save(path, learner, iteration, rng, result):
    meta = {"iteration": iteration, "rng": rng.bit_generator.state, "learner": learner.meta(),
            "log": result.log, "curve": result.curve, "tag": learner.tag}
    nncore.save_checkpoint(path, learner.arrays(), meta)


def run_training(learner: Learner, table: TransitionTable, cfg: TrainerConfig, evaluator=None,
                 checkpoint=None, resume=False, stop_at=None) -> TrainResult:
    """Train for ``cfg.iterations`` minibatch updates.

    ``evaluator(learner) -> float`` is called every ``eval_every`` iterations
    and at the end. With ``checkpoint`` set, state is written there every
    ``checkpoint_every`` iterations and at the end; ``resume`` continues from
    it. ``stop_at`` ends the run early (after checkpointing) to emulate an
    interruption.
    """
    rng = np.random.default_rng([cfg.seed, 2])
    result = TrainResult()
    start = 0
    ckpt = Path(checkpoint) if checkpoint else None
    if resume and ckpt is not None and ckpt.exists():
        arrays, meta = nncore.load_checkpoint(ckpt)
        learner.load(arrays, meta["learner"])
        rng.bit_generator.state = meta["rng"]
        result.log, result.curve = meta["log"], [tuple(p) for p in meta["curve"]]
        start = int(meta["iteration"])
    elif evaluator is not None and start == 0:
        result.curve.append((0, float(evaluator(learner))))

    last_good = ckpt.with_name(ckpt.stem + ".last_good.npz") if ckpt else None
    for it in range(start + 1, cfg.iterations + 1):
        idx = rng.integers(0, len(table), cfg.batch_size)
        snapshot = (learner.arrays(), json.loads(json.dumps(learner.meta()))) if ckpt else None
        try:
            row = learner.step(table.batch(idx), rng)
        except nncore.NonFiniteGradient as exc:
            if ckpt:
                learner.load(*snapshot)
                _save(last_good, learner, it - 1, rng, result)
            raise TrainingDiverged(f"{learner.tag}: {exc}; last good state at iteration {it - 1}") from exc
        if not all(np.all(np.isfinite(v)) for v in row.values() if not isinstance(v, str)):
            if ckpt:
                learner.load(*snapshot)
                _save(last_good, learner, it - 1, rng, result)
            raise TrainingDiverged(f"{learner.tag}: non-finite loss at iteration {it}")
        learner.sync(it)
        result.log.append({"iteration": it, **row})
        if evaluator is not None and (it % cfg.eval_every == 0 or it == cfg.iterations):
            result.curve.append((it * cfg.batch_size, float(evaluator(learner))))
        if ckpt and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            _save(ckpt, learner, it, rng, result)
        if stop_at is not None and it >= stop_at:
            if ckpt:
                _save(ckpt, learner, it, rng, result)
            return result
    if ckpt:
        _save(ckpt, learner, cfg.iterations, rng, result)
    return result


class AdamGroup:
    """Named Adam states for a learner with several parameter dicts."""

    def __init__(self, names, lr):
        self.states = {n: nncore.AdamState(lr=lr) for n in names}

    def update(self, name, params, grads):
        new, self.states[name] = nncore.adam_update(params, grads, self.states[name])
        return new

    def to_arrays(self):
        out = {}
        for n, st in self.states.items():
            out.update(st.to_arrays(f"adam/{n}/"))
        return out

    def meta(self):
        return {n: st.meta() for n, st in self.states.items()}

    def restore(self, meta, arrays):
        self.states = {n: nncore.AdamState.restore(m, arrays, f"adam/{n}/") for n, m in meta.items()}


def params_to_arrays(params, prefix):
    return {f"{prefix}{k}": v for k, v in params.items()}


def params_from_arrays(arrays, prefix):
    return {k[len(prefix):]: v.copy() for k, v in arrays.items() if k.startswith(prefix)}
