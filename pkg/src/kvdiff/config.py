"""Experiment configuration: defaults, JSON loading, strict validation."""

import copy
import hashlib
import json

from .errors import InvalidInput

DEFAULT_CONFIG = {
    "model": {"height": 8, "width": 8, "d_model": 16, "d_attn": 8, "d_text": 8,
              "hidden": 32, "blocks": 2},
    "schedule": {"T": 200, "beta_start": 1e-4, "beta_end": 0.02},
    "sampler": {"steps": 200, "scale": 6.0},
    "pretrain": {"steps": 2000, "learning_rate": 1e-2, "batch": 8, "seed": 0,
                 "cond_dropout": 0.1, "init_seed": 0},
    "train": {"steps": 250, "learning_rate": 2e-2, "batch": 8,
              "trainable_scope": "kv_only", "use_reg": "retrieved",
              "use_aug": True, "seed": 0, "train_modifier": True},
    "retrieval": {"threshold": 0.85, "cap": 200},
    "featurizer": {"feature_dim": 16, "seed": 1234},
    "seed": 0,
}

_VALIDATORS = {
    ("sampler", "steps"): lambda v: v >= 1 or "sampler.steps must be >= 1",
    ("sampler", "scale"): lambda v: v >= 0 or "sampler.scale must be >= 0",
    ("schedule", "T"): lambda v: v >= 1 or "schedule.T must be >= 1",
    ("train", "steps"): lambda v: v >= 0 or "train.steps must be >= 0",
    ("train", "learning_rate"): lambda v: v > 0 or "train.learning_rate must be > 0",
    ("train", "batch"): lambda v: v >= 1 or "train.batch must be >= 1",
    ("pretrain", "steps"): lambda v: v >= 0 or "pretrain.steps must be >= 0",
    ("retrieval", "threshold"): lambda v: 0 <= v <= 1 or "retrieval.threshold must be in [0,1]",
}


def _merge_checked(base, override, path=()):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            dotted = ".".join(path + (key,))
            raise InvalidInput(f"unknown configuration key: {dotted}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise InvalidInput(f"{'.'.join(path + (key,))} must be a table")
            out[key] = _merge_checked(base[key], value, path + (key,))
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=None):
    """Defaults, overlaid by the JSON file, overlaid by explicit overrides.
    Unknown keys are rejected with the offending key named."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            cfg = _merge_checked(cfg, json.load(fh))
    if overrides:
        cfg = _merge_checked(cfg, overrides)
    for (section, key), check in _VALIDATORS.items():
        result = check(cfg[section][key])
        if result is not True:
            raise InvalidInput(result)
    if cfg["sampler"]["steps"] > cfg["schedule"]["T"]:
        raise InvalidInput("sampler.steps cannot exceed schedule.T")
    return cfg


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
