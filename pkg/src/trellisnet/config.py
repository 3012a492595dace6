"""JSON run configuration with strict key checking.

Defaults follow the word-level language-model setting (embedding 400,
hidden 1000, 55 layers, auxiliary loss every 16 layers at weight 0.05).
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

SEED_ENV = "TRELLIS_SEED"

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "model": {
        "p": 400,
        "q": 1000,
        "depth": 55,
        "dilations": None,          # None -> all ones
        "activation": "lstm_gate",
        "aux_every": 16,
        "inject_every": 1,
        "weight_norm": False,
        "tie_weights": False,
    },
    "regularization": {
        "vd_p": 0.28,
        "dropconnect_p": 0.5,
        "emb_dropout": 0.1,
        "weight_decay": 1e-6,
        "clip_norm": 0.225,
        "aux_lambda": 0.05,
        "loss_chop": 0,
    },
    "optimizer": {
        "kind": "sgd",
        "lr": 20.0,
        "plateau_factor": 0.5,
        "patience": 5,
    },
    "task": {
        "kind": "char",             # char | copy | mnist
        "paths": {},
        "bptt_len": 140,
        "batch": 24,
        "epochs": 1,
        "seed": 0,
        "eval_batch": 1,
        "splits": [0.9, 0.05, 0.05],
        "delay": 50,
        "n_train": 2000,
        "n_val": 500,
        "n_test": 1000,
        "downsample": 1,
        "permute_seed": None,
        "target_metric": None,
        "max_steps": None,
        "log_wall_time": True,
        "metrics_path": "metrics.csv",
        "checkpoint_dir": "checkpoint",
    },
}

TASK_KINDS = ("char", "copy", "mnist")


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


@dataclass
class RunConfig:
    model: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULTS["model"]))
    regularization: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULTS["regularization"]))
    optimizer: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULTS["optimizer"]))
    task: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULTS["task"]))

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown section(s): {sorted(unknown)}")
        cfg = cls()
        for section, values in doc.items():
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be an object")
            for key, value in values.items():
                cfg.set(section, key, value)
        cfg.validate()
        return cfg

    def to_dict(self) -> Dict[str, Any]:
        return {s: copy.deepcopy(getattr(self, s)) for s in DEFAULTS}

    def set(self, section: str, key: str, value: Any) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section {section!r}")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        getattr(self, section)[key] = value

    def apply_override(self, assignment: str) -> None:
        """Apply ``section.key=value``; the value is parsed as JSON when possible."""
        name, sep, raw = assignment.partition("=")
        section, dot, key = name.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {assignment!r} is not of the form section.key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        self.set(section, key, value)

    def apply_env(self, environ=os.environ) -> None:
        if SEED_ENV in environ:
            try:
                self.task["seed"] = int(environ[SEED_ENV])
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV} must be an integer") from exc

    def validate(self) -> None:
        m, r, o, t = self.model, self.regularization, self.optimizer, self.task
        for key in ("p", "q", "depth"):
            if not isinstance(m[key], int) or m[key] < 1:
                raise ConfigError(f"model.{key} must be a positive integer")
        if m["dilations"] is not None and len(m["dilations"]) != m["depth"]:
            raise ConfigError("model.dilations must have one entry per layer")
        for key in ("vd_p", "dropconnect_p", "emb_dropout"):
            if not 0 <= r[key] < 1:
                raise ConfigError(f"regularization.{key} must be in [0, 1)")
        if r["clip_norm"] is not None and r["clip_norm"] <= 0:
            raise ConfigError("regularization.clip_norm must be positive or null")
        if o["kind"] not in ("sgd", "adam"):
            raise ConfigError("optimizer.kind must be 'sgd' or 'adam'")
        if o["lr"] < 0:
            raise ConfigError("optimizer.lr must be >= 0")
        if t["kind"] not in TASK_KINDS:
            raise ConfigError(f"task.kind must be one of {TASK_KINDS}")
        for key in ("batch", "epochs", "bptt_len"):
            if not isinstance(t[key], int) or t[key] < 1:
                raise ConfigError(f"task.{key} must be a positive integer")


def load_config(path, overrides=(), environ=os.environ) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = RunConfig.from_dict(doc)
    for item in overrides:
        cfg.apply_override(item)
    cfg.apply_env(environ)
    cfg.validate()
    return cfg
