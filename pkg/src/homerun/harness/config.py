"""Experiment configuration: one ``key = value`` text file plus overrides.

Recognised keys (defaults in brackets)::

    model.checkpoint        path of the trained model [$HOMERUN_DATA/model.ckpt]
    efe.horizon             planning horizon when not set by the scenario [5]
    efe.samples             imagined rollouts per plan [3]
    efe.threshold           bound on the goal part of G; empty = calibrate []
    efe.goal_term           terminal | summed [terminal]
    efe.prune_revisits      true | false [false]
    efe.tau_same            imagined-blocking frame-change threshold; empty = calibrate []
    experiment.d_values     comma separated distances [5,6,7,9]
    experiment.runs         scenarios per (d, door state) [10]
    experiment.runs_d9      scenarios per door state at d = 9 [16]
    experiment.seed         planner noise seed [0]
    experiment.budget       step budget per home run [200]
    experiment.replan       re-score after each shortcut step [true]
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from ..planner import PlannerConfig

DATA_ENV = "HOMERUN_DATA"


class ConfigError(ValueError):
    pass


def data_root() -> Path:
    return Path(os.environ.get(DATA_ENV, "homerun-data"))


@dataclass(frozen=True)
class ExperimentConfig:
    checkpoint: str = ""
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    d_values: tuple[int, ...] = (5, 6, 7, 9)
    runs: int = 10
    runs_d9: int = 16
    seed: int = 0
    budget: int = 200
    replan: bool = True

    def runs_for(self, d: int) -> int:
        return self.runs_d9 if d == 9 else self.runs

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _opt_float(v: str) -> float | None:
    return None if v.strip() == "" else float(v)


_PLANNER_KEYS = {
    "efe.horizon": ("horizon", int),
    "efe.samples": ("samples", int),
    "efe.threshold": ("threshold", _opt_float),
    "efe.goal_term": ("goal_term", str),
    "efe.prune_revisits": ("prune_revisits", _bool),
    "efe.tau_same": ("tau_same", _opt_float),
}
_EXPERIMENT_KEYS = {
    "model.checkpoint": ("checkpoint", str),
    "experiment.d_values": ("d_values", lambda v: tuple(int(x) for x in v.split(",") if x.strip())),
    "experiment.runs": ("runs", int),
    "experiment.runs_d9": ("runs_d9", int),
    "experiment.seed": ("seed", int),
    "experiment.budget": ("budget", int),
    "experiment.replan": ("replan", _bool),
}


def parse_pairs(text: str) -> dict[str, str]:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[homerun]\n" + text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    return dict(cp["homerun"])


def build_config(pairs: dict[str, str]) -> ExperimentConfig:
    """Apply ``key -> value`` strings on top of the defaults. A missing
    ``efe.tau_same`` means "calibrate"; the planner field then holds ``None``
    until calibration fills it in."""
    exp: dict = {}
    plan: dict = {"tau_same": None}
    for key, value in pairs.items():
        if key in _PLANNER_KEYS:
            name, conv = _PLANNER_KEYS[key]
            target = plan
        elif key in _EXPERIMENT_KEYS:
            name, conv = _EXPERIMENT_KEYS[key]
            target = exp
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
        try:
            target[name] = conv(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {key}: {value!r} ({e})") from e
    if not exp.get("checkpoint"):
        exp["checkpoint"] = str(data_root() / "model.ckpt")
    try:
        planner = PlannerConfig(**{k: v for k, v in plan.items() if v is not None or k in ("threshold",)})
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if plan.get("tau_same") is None:
        planner = replace(planner, tau_same=float("nan"))
    cfg = ExperimentConfig(planner=planner, **exp)
    bad = [d for d in cfg.d_values if d < 0 or d > cfg.planner.max_horizon]
    if bad:
        raise ConfigError(f"d values {bad} outside 0..{cfg.planner.max_horizon}")
    if cfg.runs < 1 or cfg.runs_d9 < 1:
        raise ConfigError("runs per cell must be positive")
    return cfg


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    pairs: dict[str, str] = {}
    if path is not None:
        try:
            pairs.update(parse_pairs(Path(path).read_text()))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    pairs.update(overrides or {})
    return build_config(pairs)
