"""Curvature-regularized robust dataset distillation.

Thin wrappers over the ``_guard`` extension: configs and specs are passed as
dicts and exchanged with the core as JSON.
"""

import json

from . import _guard
from ._guard import (
    ConfigError,
    DivergenceError,
    GuardError,
    Model,
    NonFiniteError,
    ParseError,
    ShapeError,
    accuracy,
    guard_loss,
    guard_penalty,
    hvp_fd,
    input_grad,
    lambda1,
    load_model,
    load_synthetic,
    per_sample_bound,
    predict,
    predict_logits,
    save_model,
    subcommands,
    trust_region_max,
)

__all__ = [
    "ConfigError", "DivergenceError", "GuardError", "Model", "NonFiniteError", "ParseError", "ShapeError",
    "accuracy", "attack", "config_hash", "default_config", "distill", "guard_loss", "guard_penalty", "hvp_fd",
    "init_model", "input_grad", "lambda1", "load_dataset", "load_model", "load_synthetic", "per_sample_bound",
    "predict", "predict_logits", "resolve_config", "robust_accuracy", "run", "save_model", "subcommands",
    "train", "trust_region_max",
]


def _dump(d):
    return json.dumps(d if d is not None else {})


def init_model(spec, seed=0):
    return _guard.init_model(_dump(spec), seed)


def load_dataset(name, params=None, seed=0):
    return _guard.load_dataset(name, _dump(params), seed)


def train(model, x, y, config=None, seed=0):
    return _guard.train(model, x, y, _dump(config), seed)


def attack(model, x, y, spec=None, seed=0):
    return _guard.attack(model, x, y, _dump(spec), seed)


def robust_accuracy(model, x, y, spec=None, seed=0):
    return _guard.robust_accuracy(model, x, y, _dump(spec), seed)


def distill(x, y, classes, spec, config=None, seed=0):
    out = _guard.distill(x, y, classes, _dump(spec), _dump(config), seed)
    out["provenance"] = json.loads(out["provenance"])
    return out


def default_config():
    return json.loads(_guard.default_config())


def resolve_config(config=None):
    return json.loads(_guard.resolve_config(_dump(config)))


def config_hash(config=None):
    return _guard.config_hash(_dump(config))


def run(subcommand, config=None, overrides=(), out=""):
    """Runs a harness subcommand; returns (summary dict, artifact paths)."""
    summary, artifacts = _guard.run(subcommand, _dump(config), list(overrides), out)
    return json.loads(summary), artifacts
