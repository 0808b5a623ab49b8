"""Run configuration: TOML tables, named profiles and dotted ``--set`` overrides."""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Mapping

import toml

from .align import AlignmentConfig, SinkhornConfig
from .train import TrainConfig


class UsageError(ValueError):
    """Bad config key, value or flag; maps to exit status 1."""


# Published hyperparameters; the "paper" profile is exactly these.
DEFAULTS: dict[str, dict[str, Any]] = {
    "model": {
        "variant": "generic",
        "M": 3,
        "L": 4,
        "gamma": 512,
        "n_layers": 4,
        "degree": 2,
        "n_harmonics": 2,
        "nhits_kernel": 2,
        "legacy_residual": False,
        "head_init": "zero",
    },
    "train": {
        "batch_size": 4096,
        "iterations": 1000,
        "lambda": 1.0,
        "base_lr": 2e-7,
        "max_lr": 2e-5,
        "step_size_up": 10,
        "lr_mode": "triangular2",
        "shared_optimizer": True,
        "clip_norm": 0.0,
        "val_every": 10,
        "checkpoint_every": 0,
    },
    "alignment": {"normalizer": "softmax", "divergence": "sinkhorn", "granularity": "stack_wise"},
    "sinkhorn": {"epsilon": 2.5e-3, "max_iters": 200, "tol": 1e-6, "unroll_grad": True, "unroll_iters": 100},
    "data": {
        "csv": "",
        "superdomains": [],
        "alpha": 50,
        "beta": 10,
        "n_instances": 75000,
        "replace": False,
        "split_by_series": False,
        "synth_length": 10000,
        "synth_series": 8,
    },
    "scenario": {"kinds": ["ODG", "CDG", "IDG"], "targets": ["commodity", "pressure"], "K": 3, "p": 2},
    "run": {"seeds": [0, 1, 2], "out": "runs", "profile": "paper"},
}

PROFILES: dict[str, dict[str, dict[str, Any]]] = {
    "paper": {},
    "desk": {
        "model": {"gamma": 64},
        "train": {"batch_size": 64, "iterations": 300, "base_lr": 3e-4, "max_lr": 3e-3, "val_every": 0},
        "sinkhorn": {"unroll_grad": False},
        "data": {"n_instances": 2000, "synth_length": 400},
    },
}

# short names accepted by --set without a table prefix
ALIASES = {"lambda": "train.lambda", "lam": "train.lambda", "epsilon": "sinkhorn.epsilon", "seed": "run.seeds"}


def _merge(base: dict, extra: Mapping) -> dict:
    out = copy.deepcopy(base)
    for table, values in extra.items():
        if table not in out:
            raise UsageError(f"unknown config table [{table}]")
        if not isinstance(values, Mapping):
            raise UsageError(f"[{table}] must be a table, got {values!r}")
        for key, value in values.items():
            if key not in out[table]:
                raise UsageError(f"unknown config key {table}.{key}")
            out[table][key] = _coerce(f"{table}.{key}", value, out[table][key])
    return out


def _coerce(path: str, value: Any, like: Any) -> Any:
    """Cast ``value`` to the type of the default it replaces."""
    try:
        if isinstance(like, bool):
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                return low in ("true", "1")
            return bool(value)
        if isinstance(like, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(like, float):
            return float(value)
        if isinstance(like, list):
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            elif not isinstance(value, list):
                value = [value]
            elem = like[0] if like else value[0] if value else ""
            return [_coerce(path, v, elem) for v in value]
        return str(value)
    except (TypeError, ValueError):
        raise UsageError(f"{path}: cannot use {value!r} where a {type(like).__name__} is expected") from None


def parse_override(item: str) -> dict:
    """``a.b=v`` to ``{"a": {"b": "v"}}``; bare aliases like ``lambda=0`` are expanded."""
    if "=" not in item:
        raise UsageError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    key = ALIASES.get(key.strip(), key.strip())
    if key.count(".") != 1:
        raise UsageError(f"override key {key!r} must be table.key")
    table, name = key.split(".")
    return {table: {name: value}}


def resolve(profile: str = "paper", path: str | Path | None = None, overrides: list[str] = ()) -> dict:
    """Defaults, then the profile, then the config file, then ``--set`` items in order."""
    if profile not in PROFILES:
        raise UsageError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = _merge(DEFAULTS, PROFILES[profile])
    if path is not None:
        try:
            loaded = toml.load(str(path))
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except toml.TomlDecodeError as exc:
            raise UsageError(f"config file {path}: {exc}") from None
        cfg = _merge(cfg, loaded)
    for item in overrides:
        cfg = _merge(cfg, parse_override(item))
    cfg["run"]["profile"] = profile
    return cfg


def dumps(cfg: Mapping) -> str:
    return toml.dumps(cfg)


def train_config(cfg: Mapping, seed: int) -> TrainConfig:
    t = cfg["train"]
    try:
        return TrainConfig(
            batch_size=t["batch_size"],
            iterations=t["iterations"],
            lam=t["lambda"],
            base_lr=t["base_lr"],
            max_lr=t["max_lr"],
            step_size_up=t["step_size_up"],
            lr_mode=t["lr_mode"],
            seed=seed,
            alignment=AlignmentConfig(**cfg["alignment"]),
            sinkhorn=SinkhornConfig(**cfg["sinkhorn"]),
            clip_norm=t["clip_norm"] or None,
            shared_optimizer=t["shared_optimizer"],
            val_every=t["val_every"],
            checkpoint_every=t["checkpoint_every"] or None,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
