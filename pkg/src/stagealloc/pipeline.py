"""Seeded experiment stages behind the command line: data, cost bench,
training, evaluation, allocation, control and reporting.

Every stage reads its inputs from and writes its outputs under the
configured output directory. Outputs carry the config hash and seed and
contain no wall-clock values, so reruns are byte-identical.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from stagealloc import allocator, balancer, baselines, costbench, envsim, metrics, mixer, nncore
from stagealloc.artifacts import atomic_write_text, file_sha256, read_json, write_csv, write_json
from stagealloc.awrq import AwrqConfig
from stagealloc.config import ConfigError, ExperimentConfig, method_dirname, parse_method
from stagealloc.evaluation import GroundTruthConfig, GroundTruthModel, RevenueSimulator
from stagealloc.training import TrainerConfig, TrainingDiverged, TransitionTable, run_training

log = logging.getLogger("stagealloc")


class StageError(RuntimeError):
    """A stage cannot run; ``kind`` goes into the machine-readable error."""

    def __init__(self, kind, message, **details):
        super().__init__(message)
        self.kind = kind
        self.details = details


@dataclass
class Paths:
    root: Path

    @property
    def dataset(self):
        return self.root / "data" / "dataset.jsonl"

    @property
    def manifest(self):
        return self.root / "data" / "manifest.json"

    @property
    def cost_model(self):
        return self.root / "cost" / "cost_model.json"

    @property
    def cost_raw(self):
        return self.root / "cost" / "raw.csv"

    @property
    def ground_truth(self):
        return self.root / "ground_truth" / "model.npz"

    def checkpoint(self, tag, seed):
        return self.root / "models" / method_dirname(tag) / f"seed{seed}.npz"

    def train_log(self, tag, seed):
        return self.root / "models" / method_dirname(tag) / f"seed{seed}_log.csv"

    def curve(self, tag, seed):
        return self.root / "models" / method_dirname(tag) / f"seed{seed}_curve.csv"

    @property
    def eval_report(self):
        return self.root / "eval" / "report.json"

    @property
    def eval_table(self):
        return self.root / "eval" / "results.csv"

    def plan(self, tag, seed):
        return self.root / "alloc" / f"{method_dirname(tag)}_seed{seed}.csv"

    def trace(self, controller, seed):
        return self.root / "control" / f"trace_{controller}_seed{seed}.csv"

    def system_model(self, seed):
        return self.root / "control" / f"system_model_seed{seed}.npz"

    @property
    def control_summary(self):
        return self.root / "control" / "summary.json"

    @property
    def sweep(self):
        return self.root / "control" / "sweep.csv"

    @property
    def report_dir(self):
        return self.root / "report"


def make_env(cfg: ExperimentConfig) -> envsim.PipelineEnv:
    try:
        return envsim.PipelineEnv(envsim.EnvConfig.from_dict(cfg["env"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid env section: {exc}") from None


def _section(cls, values, name):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from None


def _guard_existing(paths, force):
    present = [str(p) for p in paths if Path(p).exists()]
    if present and not force:
        raise StageError("exists", "output already exists; pass --force to overwrite", paths=present)


# --------------------------------------------------------------------------
# data and cost bench


def gen_data(cfg: ExperimentConfig, force=False):
    p = Paths(cfg.output_dir)
    _guard_existing([p.dataset, p.manifest], force)
    env = make_env(cfg)
    d = cfg["dataset"]
    ds = envsim.build_logged_dataset(env, d["policy"], d["n_requests"], d["seed"], d.get("train_frac", 0.8),
                                     d.get("epsilon", 0.3))
    p.dataset.parent.mkdir(parents=True, exist_ok=True)
    envsim.write_jsonl(ds, env, p.dataset)
    manifest = {"schema_version": envsim.SCHEMA_VERSION, "dataset_hash": ds.content_hash(),
                "file_sha256": file_sha256(p.dataset), "summary": ds.summary(env),
                "env_config": env.cfg.to_dict(), "policy": ds.policy}
    write_json(p.manifest, manifest, cfg.provenance(seed=d["seed"]))
    log.info("wrote %d episodes to %s", len(ds), p.dataset)
    return manifest


def load_dataset(cfg: ExperimentConfig):
    p = Paths(cfg.output_dir)
    if not p.dataset.exists():
        raise StageError("missing_input", f"dataset not found at {p.dataset}; run gen-data first",
                         missing=[str(p.dataset)])
    return envsim.read_jsonl(p.dataset)


def bench_cost(cfg: ExperimentConfig, force=False):
    p = Paths(cfg.output_dir)
    _guard_existing([p.cost_model, p.cost_raw], force)
    env = make_env(cfg)
    bcfg = _section(costbench.BenchConfig, cfg["bench"], "bench")
    model, rows = costbench.run_bench(env, bcfg, log=log.info)
    p.cost_model.parent.mkdir(parents=True, exist_ok=True)
    model.meta = {**model.meta, **cfg.provenance(seed=bcfg.seed)}
    model.save(p.cost_model)
    cols = ["kind", "stage", "tier", "queue_length", "p", "n", "cores", "qps", "cost"]
    write_csv(p.cost_raw, cols, rows, cfg.provenance(seed=bcfg.seed))
    return model


def load_cost_model(cfg: ExperimentConfig):
    p = Paths(cfg.output_dir)
    if not p.cost_model.exists():
        raise StageError("missing_input", f"cost model not found at {p.cost_model}; run bench-cost first",
                         missing=[str(p.cost_model)])
    return costbench.CostModel.load(p.cost_model)


# --------------------------------------------------------------------------
# ground truth and learners


def ground_truth(cfg: ExperimentConfig, env, ds):
    """Fit (or load) the revenue ensemble used by every evaluation."""
    p = Paths(cfg.output_dir)
    gcfg = dict(cfg["ground_truth"])
    if "hidden" in gcfg:
        gcfg["hidden"] = tuple(gcfg["hidden"])
    gcfg = _section(GroundTruthConfig, gcfg, "ground_truth")
    if p.ground_truth.exists():
        arrays, meta = nncore.load_checkpoint(p.ground_truth)
        if meta.get("dataset_hash") == ds.content_hash() and meta.get("gt_config") == repr(gcfg):
            return GroundTruthModel.from_arrays(arrays)
    log.info("fitting ground-truth ensemble (%d models)", gcfg.n_models)
    gt = GroundTruthModel.fit(env, ds, gcfg)
    p.ground_truth.parent.mkdir(parents=True, exist_ok=True)
    nncore.save_checkpoint(p.ground_truth, gt.to_arrays(),
                           {"dataset_hash": ds.content_hash(), "gt_config": repr(gcfg), **cfg.provenance()})
    return gt


def method_configs(cfg: ExperimentConfig, tag, seed):
    name, family, over = parse_method(tag)
    sec = {k: dict(cfg[k]) for k in ("trainer", "awrq", "mixer", "baselines")}
    for k, v in over.items():
        sec[k].update(v)
    tcfg = _section(TrainerConfig, {**sec["trainer"], "seed": int(seed)}, "trainer")
    if family == "awrq":
        acfg = _section(AwrqConfig, sec["awrq"], "awrq")
        mcfg = _section(mixer.MixerConfig, sec["mixer"], "mixer")
        return name, family, tcfg, (acfg, mcfg)
    bvals = dict(sec["baselines"])
    if "hidden" in bvals:
        bvals["hidden"] = tuple(bvals["hidden"])
    return name, family, tcfg, _section(baselines.BaselineConfig, bvals, "baselines")


def build_learner(cfg, env, train_ds, tag, seed):
    name, family, tcfg, mcfgs = method_configs(cfg, tag, seed)
    if family == "awrq":
        acfg, mcfg = mcfgs
        w = mixer.vgca_weights_for(env, train_ds)
        return mixer.AwrqMixer(env, acfg, mcfg, w, tcfg.lr, tcfg.seed), tcfg
    return baselines.make_learner(env, name, mcfgs, tcfg.lr, tcfg.seed), tcfg


def load_learner(cfg, env, ds, tag, seed):
    path = Paths(cfg.output_dir).checkpoint(tag, seed)
    learner, _ = build_learner(cfg, env, ds.split("train"), tag, seed)
    arrays, meta = nncore.load_checkpoint(path)
    learner.load(arrays, meta["learner"])
    return learner, meta


def _train_one(cfg_raw, tag, seed, resume, stop_at):
    cfg = ExperimentConfig(cfg_raw)
    env = make_env(cfg)
    ds = load_dataset(cfg)
    sim = RevenueSimulator(env, ds, ground_truth(cfg, env, ds))
    p = Paths(cfg.output_dir)
    ckpt = p.checkpoint(tag, seed)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    learner, tcfg = build_learner(cfg, env, ds.split("train"), tag, seed)
    table = TransitionTable.from_dataset(env, ds.split("train"))

    def evaluator(m):
        return sim.return_percent(m.q_table(env, sim.contexts))

    try:
        result = run_training(learner, table, tcfg, evaluator, ckpt, resume, stop_at)
    except TrainingDiverged as exc:
        raise StageError("diverged", str(exc), method=tag, seed=int(seed),
                         last_good=str(ckpt.with_name(ckpt.stem + ".last_good.npz"))) from None
    prov = cfg.provenance(seed=seed, method=tag)
    if result.log:
        write_csv(p.train_log(tag, seed), list(result.log[0]), result.log, prov)
    write_csv(p.curve(tag, seed), ["env_steps", "return_pct"],
              [{"env_steps": int(s), "return_pct": float(v)} for s, v in result.curve], prov)
    final = result.curve[-1][1] if result.curve else float("nan")
    log.info("%s seed %d: %d iterations, final Return%% %.3f", tag, seed, len(result.log), final)
    return {"method": tag, "seed": int(seed), "iterations": len(result.log), "final_return_pct": final}


def train(cfg: ExperimentConfig, methods=None, seeds=None, resume=False, stop_at=None, workers=1):
    methods = list(methods or cfg["methods"])
    seeds = list(cfg.seeds if seeds is None else seeds)
    for m in methods:
        parse_method(m)
    load_dataset(cfg)  # fail fast
    jobs = [(cfg.raw, m, s, resume, stop_at) for m in methods for s in seeds]
    if workers > 1 and len(jobs) > 1:
        # fit the shared ground truth once before fanning out
        env = make_env(cfg)
        ground_truth(cfg, env, load_dataset(cfg))
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_train_one, *zip(*jobs)))
    return [_train_one(*j) for j in jobs]


# --------------------------------------------------------------------------
# evaluation


def _missing_checkpoints(cfg, methods, seeds):
    p = Paths(cfg.output_dir)
    return [str(p.checkpoint(m, s)) for m in methods for s in seeds if not p.checkpoint(m, s).exists()]


def evaluate(cfg: ExperimentConfig, methods=None, seeds=None):
    methods = list(methods or cfg["methods"])
    seeds = list(cfg.seeds if seeds is None else seeds)
    missing = _missing_checkpoints(cfg, methods, seeds)
    if missing:
        raise StageError("missing_checkpoints", f"{len(missing)} checkpoint(s) missing; run train first",
                         missing=missing)
    env = make_env(cfg)
    ds = load_dataset(cfg)
    gt = ground_truth(cfg, env, ds)
    sim = RevenueSimulator(env, ds, gt)
    test = sim.test
    logged = env.joint_index(test.actions)
    window = int(cfg["metrics"]["gradient_window"])
    rows = [{"method": "ground_truth", "seed": None, "row_id": "ground_truth",
             "r_s": sim.ground_truth_rs(), "return_pct": sim.return_percent(sim.gt_table),
             "convergence_steps": None, "converged": None, "gradient_variance": None}]
    for tag in methods:
        for seed in seeds:
            learner, meta = load_learner(cfg, env, ds, tag, seed)
            q = learner.q_table(env, sim.contexts)
            conv = metrics.convergence_steps(meta["curve"]) if meta["curve"] else None
            norms = [r["grad_norm"] for r in meta["log"]]
            gv = metrics.gradient_variance(norms, window) if len(norms) >= window else None
            rows.append({"method": tag, "seed": int(seed), "row_id": f"{tag}/seed{seed}",
                         "r_s": metrics.spearman_rs(q[np.arange(len(q)), logged], test.reward),
                         "return_pct": sim.return_percent(q),
                         "convergence_steps": None if conv is None else conv.steps,
                         "converged": None if conv is None else conv.reached,
                         "gradient_variance": gv})
    summary = {}
    for tag in methods:
        sel = {r["seed"]: r for r in rows if r["method"] == tag}
        summary[tag] = {k: _report(k, [sel.get(s, {}).get(k) for s in seeds])
                        for k in ("r_s", "return_pct", "convergence_steps", "gradient_variance")}
    body = {"rows": rows, "summary": summary, "seeds": seeds, "methods": methods,
            "gradient_window": window, "n_test": len(test)}
    p = Paths(cfg.output_dir)
    write_json(p.eval_report, body, cfg.provenance())
    cols = ["row_id", "method", "seed", "r_s", "return_pct", "convergence_steps", "converged", "gradient_variance"]
    write_csv(p.eval_table, cols, rows, cfg.provenance())
    return body


def _report(name, values):
    r = metrics.MetricReport(name, values)
    return {"values": values, "mean": r.mean, "std": r.std, "complete": r.complete, "cell": r.cell(4)}


# --------------------------------------------------------------------------
# allocation


def allocate(cfg: ExperimentConfig, methods=None, seeds=None):
    methods = list(methods or cfg["methods"])
    seeds = list(cfg.seeds if seeds is None else seeds)
    missing = _missing_checkpoints(cfg, methods, seeds)
    if missing:
        raise StageError("missing_checkpoints", f"{len(missing)} checkpoint(s) missing; run train first",
                         missing=missing)
    env = make_env(cfg)
    ds = load_dataset(cfg)
    sim = RevenueSimulator(env, ds, ground_truth(cfg, env, ds))
    p = Paths(cfg.output_dir)
    costs = costbench.cost_table(env, load_cost_model(cfg), sim.contexts) if p.cost_model.exists() else None
    out = []
    for tag in methods:
        for seed in seeds:
            learner, _ = load_learner(cfg, env, ds, tag, seed)
            plan = sim.plan(learner.q_table(env, sim.contexts))
            rows = [{"request_id": i, "action": int(a), "predicted_q": float(plan.predicted[i]),
                     "true_q": float(sim.gt_table[i, a]), "cost": "" if costs is None else float(costs[i, a])}
                    for i, a in enumerate(plan.assignment)]
            write_csv(p.plan(tag, seed), ["request_id", "action", "predicted_q", "true_q", "cost"], rows,
                      cfg.provenance(seed=seed, method=tag))
            out.append({"method": tag, "seed": int(seed),
                        "return_pct": allocator.return_percent(plan, sim.gt_table, sim.gt_plan)})
    return out


# --------------------------------------------------------------------------
# control


def request_pool(cfg: ExperimentConfig, env, seed):
    """Per-request Q and estimated-cost tables for the closed-loop plant."""
    ccfg = cfg["control"]
    ds = load_dataset(cfg)
    cm = load_cost_model(cfg)
    ctx = env.sample_contexts(int(ccfg["pool_size"]), np.random.default_rng([seed, 61]))
    source = ccfg["q_source"]
    if source == "ground_truth":
        q = ground_truth(cfg, env, ds).q_table(env, ctx)
    else:
        path = Paths(cfg.output_dir).checkpoint(source, seed)
        if not path.exists():
            raise StageError("untrained", f"q_source {source!r} has no checkpoint for seed {seed}",
                             missing=[str(path)])
        q = load_learner(cfg, env, ds, source, seed)[0].q_table(env, ctx)
    return balancer.RequestPool(q, costbench.cost_table(env, cm, ctx))


def control(cfg: ExperimentConfig, seeds=None, sweep=True):
    seeds = list(cfg.seeds if seeds is None else seeds)
    ccfg = cfg["control"]
    controllers = list(ccfg["controllers"])
    unknown = set(controllers) - set(balancer.CONTROLLERS)
    if unknown:
        raise ConfigError(f"unknown controllers {sorted(unknown)}")
    env = make_env(cfg)
    p = Paths(cfg.output_dir)
    plant_cfg = balancer.PlantConfig(**{k: ccfg[k] for k in ("rho", "headroom", "budget") if k in ccfg})
    mpc_cfg = _section(balancer.MPCConfig, {**cfg["mpc"], "budget": plant_cfg.budget}, "mpc")
    fb_cfg = _section(balancer.FeedbackConfig, cfg["feedback"], "feedback")
    duration = int(ccfg["duration"])
    per_seed, sweep_rows = [], []
    for seed in seeds:
        plant = balancer.Plant(request_pool(cfg, env, seed), ccfg["base_qps"], plant_cfg)
        model = balancer.train_system_model(plant, seed=seed, days=int(ccfg["system_model_days"]))
        nncore.save_checkpoint(p.system_model(seed), model.to_arrays(), cfg.provenance(seed=seed))
        profile = balancer.control_traffic(seed, duration, plant.base)
        for ctl in controllers:
            r = balancer.closed_loop_run(ctl, plant, profile, duration, model, mpc_cfg, fb_cfg, seed=seed)
            write_csv(p.trace(ctl, seed), ["t", "traffic", "lambda", "predicted", "realized", "over_budget"],
                      r.trace, cfg.provenance(seed=seed, controller=ctl))
            per_seed.append({"controller": ctl, "seed": int(seed), "mu": r.mu, "nu": r.nu,
                             "row_id": f"{ctl}/seed{seed}"})
            log.info("%s seed %d: mu %.4f nu %.4f", ctl, seed, r.mu, r.nu)
        if sweep and seed == seeds[0]:
            s = cfg["sweep"]
            for row in balancer.sensitivity_sweep(plant, profile, duration, model, mpc_cfg, s["alphas"],
                                                  s["betas"], s["horizons"], seed=seed):
                sweep_rows.append({**row, "seed": int(seed)})
        log.info("system model seed %d holdout rmse %.4f", seed, model.rmse)
    summary = {ctl: {k: _report(k, [r[k] for r in per_seed if r["controller"] == ctl]) for k in ("mu", "nu")}
               for ctl in controllers}
    body = {"rows": per_seed, "summary": summary, "seeds": seeds, "budget": plant_cfg.budget,
            "duration": duration}
    write_json(p.control_summary, body, cfg.provenance())
    if sweep:
        write_csv(p.sweep, ["parameter", "value", "seed", "mu", "nu"], sweep_rows, cfg.provenance())
    return body


# --------------------------------------------------------------------------
# report


ABLATIONS = ("awrq_mixer", "awrq_no_aw", "awrq_no_vgca", "awrq_no_smc")


def report(cfg: ExperimentConfig):
    """Markdown and CSV tables from whatever evaluation and control outputs
    exist; absent seeds are flagged rather than filled."""
    p = Paths(cfg.output_dir)
    out = p.report_dir
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# Experiment report", "", f"config hash `{cfg.hash}`", ""]
    written = []
    if p.eval_report.exists():
        ev = read_json(p.eval_report)
        seeds = cfg.seeds
        by = {}
        for r in ev["rows"]:
            by.setdefault(r["method"], {})[r["seed"]] = r

        def cells(tag, keys):
            got = by.get(tag, {})
            row = {"method": tag, "sources": ";".join(got[s]["row_id"] for s in seeds if s in got)}
            for k in keys:
                rep = metrics.MetricReport(k, [got.get(s, {}).get(k) if s in got else None for s in seeds])
                row[k] = rep.cell(4)
            return row

        offline = [cells(t, ("r_s", "return_pct")) for t in ev["methods"]]
        gt = by.get("ground_truth", {}).get(None)
        write_csv(out / "offline.csv", ["method", "r_s", "return_pct", "sources"], offline, cfg.provenance())
        written.append("offline.csv")
        lines += ["## Offline evaluation", "", "| method | r_s | Return% |", "|---|---|---|"]
        lines += [f"| {r['method']} | {r['r_s']} | {r['return_pct']} |" for r in offline]
        if gt:
            lines += ["", f"ground-truth model: r_s vs latent revenue {gt['r_s']:.4f}, "
                          f"self Return% {gt['return_pct']:.2f}"]
        abl = [t for t in ABLATIONS if t in by]
        if abl:
            keys = ("r_s", "return_pct", "convergence_steps", "gradient_variance")
            rows = [cells(t, keys) for t in abl]
            write_csv(out / "ablation.csv", ["method", *keys, "sources"], rows, cfg.provenance())
            written.append("ablation.csv")
            lines += ["", "## Ablations", "", "| variant | r_s | Return% | convergence steps | gradient variance |",
                      "|---|---|---|---|---|"]
            lines += [f"| {r['method']} | {r['r_s']} | {r['return_pct']} | {r['convergence_steps']} | "
                      f"{r['gradient_variance']} |" for r in rows]
        sens = [t for t in ev["methods"] if t.startswith("awrq_mixer[")]
        if sens:
            rows = [cells(t, ("r_s", "return_pct")) for t in sens]
            write_csv(out / "sensitivity.csv", ["method", "r_s", "return_pct", "sources"], rows, cfg.provenance())
            written.append("sensitivity.csv")
            lines += ["", "## Sensitivity", "", "| setting | r_s | Return% |", "|---|---|---|"]
            lines += [f"| {r['method']} | {r['r_s']} | {r['return_pct']} |" for r in rows]
    else:
        lines += ["offline evaluation: missing (run evaluate)"]
    if p.control_summary.exists():
        cs = read_json(p.control_summary)
        rows = []
        for ctl in cs["summary"]:
            got = {r["seed"]: r for r in cs["rows"] if r["controller"] == ctl}
            row = {"controller": ctl, "sources": ";".join(got[s]["row_id"] for s in cfg.seeds if s in got)}
            for k in ("mu", "nu"):
                row[k] = metrics.MetricReport(k, [got[s][k] if s in got else None for s in cfg.seeds]).cell(4)
            rows.append(row)
        write_csv(out / "control.csv", ["controller", "mu", "nu", "sources"], rows, cfg.provenance())
        written.append("control.csv")
        lines += ["", "## Load control", "", "| controller | mu | nu |", "|---|---|---|"]
        lines += [f"| {r['controller']} | {r['mu']} | {r['nu']} |" for r in rows]
    else:
        lines += ["", "load control: missing (run control)"]
    atomic_write_text(out / "report.md", "\n".join(lines) + "\n")
    return {"files": written + ["report.md"]}
