"""Experiment configuration: YAML files checked against a JSON schema, with
profile defaults underneath user overrides."""

from __future__ import annotations

import copy
import os
import re
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import yaml

from stagealloc.artifacts import config_hash

OUTPUT_ENV = "STAGEALLOC_OUTPUT_DIR"
PROFILES = ("desk", "paper-faithful")

AWRQ_VARIANTS = {
    "awrq_mixer": {},
    "awrq_no_aw": {"awrq": {"adaptive": False}},
    "awrq_no_vgca": {"mixer": {"vgca": False}},
    "awrq_no_smc": {"mixer": {"transform": "abs"}},
}
BASELINE_METHODS = ("dqn", "ddqn", "drqn", "avg_ensemble", "rem", "vdn", "qmix", "weighted_qmix")
OVERRIDE_KEYS = {"gamma": "awrq", "n_heads": "awrq", "epsilon": "awrq", "tau": "awrq", "lr": "trainer"}

_DESK = {
    "profile": "desk",
    "seeds": [0, 1, 2, 3, 4],
    "output_dir": "runs/desk",
    "env": {},
    "dataset": {"policy": "uniform_random", "n_requests": 24000, "seed": 0, "train_frac": 0.8},
    "bench": {},
    "ground_truth": {"n_models": 5, "hidden": [128, 128], "iterations": 3000},
    "methods": ["awrq_mixer", "vdn", "qmix", "dqn", "drqn"],
    "trainer": {"iterations": 20000, "batch_size": 256, "lr": 0.003, "eval_every": 500, "checkpoint_every": 1000},
    "awrq": {"n_heads": 5, "hidden": 32, "mlp": [64, 32], "gamma": 0.9, "tau": 100, "epsilon": 0.05, "dropout": 0.0},
    "mixer": {"mix_hidden": 32, "hyper_hidden": 64, "transform": "softplus", "vgca": True},
    "baselines": {"hidden": [64, 32], "gru_hidden": 32, "n_heads": 5, "gamma": 0.9, "tau": 100},
    "metrics": {"gradient_window": 1000},
    "control": {"duration": 1440, "base_qps": 100.0, "pool_size": 2000, "q_source": "ground_truth",
                "system_model_days": 4, "controllers": ["mpc", "feedback", "binary_search", "static"]},
    "mpc": {"horizon": 10, "alpha": 0.4, "beta": 8.0, "forecast": "oracle", "per_step": True},
    "feedback": {"kp": 80.0, "ki": 0.1},
    "sweep": {"alphas": [0.2, 0.4, 0.6, 0.8, 1.0], "betas": [0, 2, 4, 8, 16], "horizons": [2, 5, 10, 15]},
}

# values from the published hyperparameter table; everything else as desk
_PAPER = {
    "profile": "paper-faithful",
    "output_dir": "runs/paper",
    "trainer": {"lr": 0.01, "batch_size": 2048},
    "awrq": {"n_heads": 20, "hidden": 256, "mlp": [512, 256], "gamma": 0.9, "tau": 100, "epsilon": 0.05,
             "dropout": 0.2},
}

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_SECTION = {"type": "object"}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "profile": {"enum": list(PROFILES)},
        "seeds": {"type": "array", "items": _INT, "minItems": 1},
        "output_dir": {"type": "string", "minLength": 1},
        "env": _SECTION,
        "env_file": {"type": "string"},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"policy": {"enum": ["uniform_random", "epsilon_mixture"]},
                           "n_requests": {"type": "integer", "minimum": 1}, "seed": _INT,
                           "train_frac": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                           "epsilon": _NUM},
        },
        "bench": _SECTION,
        "ground_truth": _SECTION,
        "methods": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "trainer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"iterations": {"type": "integer", "minimum": 0},
                           "batch_size": {"type": "integer", "minimum": 1},
                           "lr": {"type": "number", "exclusiveMinimum": 0},
                           "eval_every": {"type": "integer", "minimum": 1},
                           "checkpoint_every": {"type": "integer", "minimum": 0}},
        },
        "awrq": _SECTION,
        "mixer": _SECTION,
        "baselines": _SECTION,
        "metrics": _SECTION,
        "control": _SECTION,
        "mpc": _SECTION,
        "feedback": _SECTION,
        "sweep": _SECTION,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def profile_defaults(profile):
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    return _DESK if profile == "desk" else _merge(_DESK, _PAPER)


@dataclass
class ExperimentConfig:
    raw: dict
    source: Path | None = None

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    @property
    def seeds(self):
        return list(self.raw["seeds"])

    @property
    def hash(self):
        body = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return config_hash(body)

    def provenance(self, seed=None, **extra):
        p = {"config_hash": self.hash}
        if seed is not None:
            p["seed"] = int(seed)
        p.update(extra)
        return p


def build_config(user: dict | None = None, source=None) -> ExperimentConfig:
    user = dict(user or {})
    try:
        jsonschema.validate(user, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    raw = _merge(profile_defaults(user.get("profile", "desk")), user)
    if "env_file" in raw:
        env_path = Path(raw.pop("env_file"))
        if source is not None and not env_path.is_absolute():
            env_path = Path(source).parent / env_path
        if not env_path.exists():
            raise ConfigError(f"environment config not found: {env_path}")
        raw["env"] = _merge(yaml.safe_load(env_path.read_text()) or {}, raw.get("env", {}))
    if os.environ.get(OUTPUT_ENV):
        raw["output_dir"] = os.environ[OUTPUT_ENV]
    for m in raw["methods"]:
        parse_method(m)
    return ExperimentConfig(raw, Path(source) if source else None)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping at the top level")
    return build_config(data, path)


_TAG = re.compile(r"^([a-z_]+)(?:\[(.*)\])?$")


def parse_method(tag):
    """``name`` or ``name[key=value,...]`` -> (name, family, section overrides).

    Overrides accept gamma, n_heads, epsilon, tau and lr, e.g.
    ``awrq_mixer[gamma=0.7]``.
    """
    m = _TAG.match(tag)
    if not m or (m.group(1) not in AWRQ_VARIANTS and m.group(1) not in BASELINE_METHODS):
        known = ", ".join(list(AWRQ_VARIANTS) + list(BASELINE_METHODS))
        raise ConfigError(f"unknown method {tag!r}; known methods: {known}")
    name = m.group(1)
    family = "awrq" if name in AWRQ_VARIANTS else "baseline"
    over = copy.deepcopy(AWRQ_VARIANTS.get(name, {}))
    if m.group(2):
        for item in m.group(2).split(","):
            key, _, val = item.partition("=")
            key = key.strip()
            if key not in OVERRIDE_KEYS:
                raise ConfigError(f"method override {key!r} not supported in {tag!r}")
            section = OVERRIDE_KEYS[key]
            if family == "baseline" and section == "awrq":
                section = "baselines"
            try:
                num = float(val)
            except ValueError:
                raise ConfigError(f"override {key!r} in {tag!r} needs a number") from None
            over.setdefault(section, {})[key] = int(num) if key in ("n_heads", "tau") else num
    return name, family, over


def method_dirname(tag):
    return re.sub(r"[^a-zA-Z0-9_.=-]+", "_", tag).strip("_")


def dump_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.raw, sort_keys=True)
