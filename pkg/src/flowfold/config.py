"""Run configuration: a strict YAML file plus dotted command-line overrides.

A config file has the sections below; any section may be omitted and any
key left out takes its default. Unknown sections or keys are rejected::

    seed: 0
    threads: 1
    output: runs/gauss
    dataset: {family: gaussian, n: 100000, seed: 0, params: {}, path: null}
    model:   {mode: generate, hidden: 512, blocks: 5, cond_embed_dim: 128,
              time: {n_frequencies: 32, omega_min: 1.0, omega_max: 64.0, projected_dim: 64}}
    train:   {lr: 1.0e-4, weight_decay: 1.0e-5, batch_size: 20000, epochs: 800, ...}
    solver:  {atol: null, rtol: null, max_steps: 10000}   # null: command default
    smear:   {sigma_smear: 1.0, k: 0.01, seed: 0}
    preprocess: {scale: 5.0}

Overrides such as ``--train.lr=1e-4`` or ``--model.hidden 64`` are applied
after the file; values are parsed as YAML scalars.
"""

from __future__ import annotations

import copy
import re
from typing import Any

import yaml

from .data.kinematics import SmearConfig
from .data.mocks import MockSpec
from .errors import ConfigError
from .odeint import GENERATE_TOL, SolverConfig
from .training import TrainConfig
from .velocity import NetConfig, TimeEmbedConfig

# train section uses short names; map them onto TrainConfig fields
TRAIN_ALIASES = {"lr": "learning_rate", "epochs": "max_epochs"}

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "threads": 1,
    "output": "run",
    "dataset": {"family": "gaussian", "n": 100_000, "seed": 0, "params": {}, "path": None},
    "model": {
        "mode": "generate",
        "hidden": 512,
        "blocks": 5,
        "cond_embed_dim": 128,
        "time": {"n_frequencies": 32, "omega_min": 1.0, "omega_max": 64.0, "projected_dim": 64},
    },
    "train": {
        "lr": 1e-4,
        "weight_decay": 1e-5,
        "batch_size": 20_000,
        "epochs": 800,
        "lr_decay_factor": 0.5,
        "lr_patience_epochs": 50,
        "lr_floor": 1e-7,
        "lr_threshold": 1e-4,
        "validation_subset": 50_000,
        "validation_tol": 1e-3,
        "checkpoint_monitor": "chi2_mean",
    },
    "solver": {"atol": None, "rtol": None, "max_steps": 10_000},
    "smear": {"sigma_smear": 1.0, "k": 0.01, "seed": 0},
    "preprocess": {"scale": 5.0},
}

# sections whose contents are free-form
_OPEN = {("dataset", "params")}


def _merge(base: dict, update: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = ".".join(path + (str(key),))
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if path + (key,) in _OPEN:
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
            out[key] = {**base[key], **value}
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping, got {type(value).__name__}")
            out[key] = _merge(base[key], value, path + (key,))
        else:
            out[key] = value
    return out


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?(?:[eE][-+]?[0-9]+)?|\.[0-9_]+(?:[eE][-+]?[0-9]+)?"
               r"|\.inf|\.Inf|\.INF|\.nan|\.NaN|\.NAN)$"),
    list("-+0123456789."),
)


def _load(text):
    return yaml.load(text, Loader=_Loader)


def parse_override(item: str, value: str | None = None) -> dict:
    """``"train.lr=1e-4"`` (or key and value separately) to a nested dict."""
    item = item.lstrip("-")
    if value is None:
        if "=" not in item:
            raise ConfigError(f"override {item!r} needs a value (use --key=value)")
        item, value = item.split("=", 1)
    try:
        parsed = _load(value) if value != "" else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {item!r}: {exc}") from exc
    keys = item.split(".")
    if not all(keys):
        raise ConfigError(f"malformed override key {item!r}")
    nested: dict = parsed
    for k in reversed(keys):
        nested = {k: nested}
    return nested


def load_config(path=None, overrides: list[dict] | None = None) -> dict:
    """Defaults, then the YAML file, then each override, with strict key checking."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                raw = _load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping at top level")
        cfg = _merge(cfg, raw)
    for ov in overrides or []:
        cfg = _merge(cfg, ov)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if cfg["model"]["mode"] not in ("generate", "unfold"):
        raise ConfigError(f"model.mode must be 'generate' or 'unfold', got {cfg['model']['mode']!r}")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError("threads must be a positive integer")
    # building the typed configs runs their own checks
    train_config(cfg)
    solver_config(cfg)
    smear_config(cfg)
    net_config(cfg, 1)


def _build(factory, kwargs: dict, section: str):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid {section} section: {exc}") from exc


def train_config(cfg: dict) -> TrainConfig:
    kwargs = {TRAIN_ALIASES.get(k, k): v for k, v in cfg["train"].items()}
    return _build(TrainConfig, {**kwargs, "seed": cfg["seed"]}, "train")


def solver_config(cfg: dict, default_tol: float = GENERATE_TOL) -> SolverConfig:
    """Solver settings; unset tolerances fall back to the command's default."""
    s = dict(cfg["solver"])
    for key in ("atol", "rtol"):
        if s[key] is None:
            s[key] = default_tol
    return _build(SolverConfig, s, "solver")


def smear_config(cfg: dict) -> SmearConfig:
    return _build(SmearConfig, cfg["smear"], "smear")


def net_config(cfg: dict, dim: int) -> NetConfig:
    m = cfg["model"]
    time = _build(TimeEmbedConfig, m["time"], "model.time")
    return _build(NetConfig, {"dim": dim, "hidden": m["hidden"], "blocks": m["blocks"],
                              "conditional": m["mode"] == "unfold", "cond_embed_dim": m["cond_embed_dim"],
                              "time": time}, "model")


def mock_spec(cfg: dict) -> MockSpec:
    d = cfg["dataset"]
    spec = MockSpec(d["family"], int(d["n"]), int(d["seed"]), dict(d["params"]))
    if spec.family != "mcpom":
        spec.resolved_params()
    return spec


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)
