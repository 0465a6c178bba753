"""Run configuration: one flat record of defaults, a ``key = value`` file format,
and environment overrides.

File grammar, one entry per line::

    # comment            (whole-line comments only)
    key = value          (whitespace around '=' is ignored)

Keys are RunConfig field names.  Values are parsed by the field's type:
integers, floats, booleans (true/false/1/0/yes/no) or raw strings (no
quoting; everything after '=' up to the line end, stripped).

Precedence, lowest first: field defaults, config file, environment
variables named ``CONCEPTLOOP_<KEY>`` (key upper-cased), command-line flags.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .rewards import ABLATIONS
from .synthbench import FAMILIES
from .training import SCHEDULES, TrainSettings

ENV_PREFIX = "CONCEPTLOOP_"
ROUTER_MODES = ("direct", "reason", "adaptive")
SWEEP_AXES = ("L2", "k", "rewards")
MOSAIC_K = (1, 2, 3)
_TRUE = ("true", "1", "yes", "on")
_FALSE = ("false", "0", "no", "off")


class ConfigError(ValueError):
    """Invalid key, value or combination of values."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    C: int = 16
    L2: int = 8
    G: int = 8
    beta: float = 0.04
    theta: float = 0.5
    k: int = 2
    families: str = "all"
    n_train: int = 64
    n_eval: int = 96
    eval_offset: int = 10000
    rewards: str = "all"
    router: str = "adaptive"
    eval_trajectory: str = "policy"
    workers: int = 1
    optimizer: str = "adam"
    stage1_steps: int = 500
    stage1_lr: float = 0.03
    stage1_schedule: str = "cosine"
    stage1_box_weight: float = 1.0
    stage1_batch: int = 16
    stage1_direct: bool = True
    stage2_steps: int = 2000
    stage2_policy_lr: float = 0.05
    stage2_core_lr: float = 0.003
    seg_trajectories: str = "all"
    reshuffle: bool = False
    sweep_axis: str = "L2"
    sweep_values: str = "auto"
    dataset: str = "runs/dataset"
    stage1_checkpoint: str = "runs/stage1.npz"
    checkpoint: str = "runs/model.npz"
    trace: str = "runs/trace.jsonl"
    report: str = "runs/report"
    figures: bool = True

    def family_list(self) -> tuple[str, ...]:
        if self.families == "all":
            return FAMILIES
        return tuple(f.strip() for f in self.families.split(",") if f.strip())

    def sweep_list(self) -> list:
        raw = [v.strip() for v in self.sweep_values.split(",") if v.strip()]
        if not raw:
            raise ConfigError("sweep_values is empty; give a comma-separated list")
        kind = {f.name: f.type for f in fields(self)}[self.sweep_axis]
        return [_parse_value(self.sweep_axis, kind, v) for v in raw]

    def train_settings(self) -> TrainSettings:
        names = {f.name for f in fields(TrainSettings)}
        return TrainSettings(**{k: v for k, v in asdict(self).items() if k in names})

    def validate(self) -> "RunConfig":
        def bad(msg):
            raise ConfigError(msg)

        if self.k not in MOSAIC_K:
            bad(f"k must be one of {', '.join(map(str, MOSAIC_K))}; got {self.k}")
        for f in self.family_list():
            if f not in FAMILIES:
                bad(f"unknown family {f!r}; allowed: {', '.join(FAMILIES)}")
        if not self.family_list():
            bad("families is empty")
        if self.rewards not in ABLATIONS:
            bad(f"rewards must be one of {', '.join(ABLATIONS)}; got {self.rewards!r}")
        if self.router not in ROUTER_MODES:
            bad(f"router must be one of {', '.join(ROUTER_MODES)}; got {self.router!r}")
        if self.eval_trajectory not in ("policy", "oracle"):
            bad(f"eval_trajectory must be policy or oracle; got {self.eval_trajectory!r}")
        if self.optimizer not in ("adam", "sgd"):
            bad(f"optimizer must be adam or sgd; got {self.optimizer!r}")
        if self.stage1_schedule not in SCHEDULES:
            bad(f"stage1_schedule must be one of {', '.join(SCHEDULES)}")
        if self.seg_trajectories not in ("all", "best"):
            bad(f"seg_trajectories must be all or best; got {self.seg_trajectories!r}")
        if self.sweep_axis not in SWEEP_AXES:
            bad(f"sweep_axis must be one of {', '.join(SWEEP_AXES)}; got {self.sweep_axis!r}")
        for name in ("C", "L2", "G", "n_train", "n_eval", "stage1_batch", "workers"):
            if getattr(self, name) < 1:
                bad(f"{name} must be at least 1; got {getattr(self, name)}")
        for name in ("stage1_steps", "stage2_steps", "eval_offset"):
            if getattr(self, name) < 0:
                bad(f"{name} must be non-negative; got {getattr(self, name)}")
        if self.G < 2:
            bad(f"G must be at least 2 for group-relative advantages; got {self.G}")
        if not 0.0 <= self.theta <= 1.0:
            bad(f"theta must lie in [0, 1]; got {self.theta}")
        if self.beta < 0:
            bad(f"beta must be non-negative; got {self.beta}")
        return self


def _parse_value(key: str, kind, raw: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw.strip()


def _field_types() -> dict[str, str]:
    return {f.name: f.type if isinstance(f.type, str) else f.type.__name__
            for f in fields(RunConfig)}


def apply(cfg: RunConfig, values: dict[str, str]) -> RunConfig:
    """Overlay raw string values onto ``cfg`` with type conversion."""
    types = _field_types()
    parsed = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"unknown key {key!r}; known keys: {', '.join(types)}")
        parsed[key] = _parse_value(key, types[key], raw)
    return replace(cfg, **parsed)


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = s.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def env_values(environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    by_upper = {name.upper(): name for name in _field_types()}
    out = {}
    for var, value in environ.items():
        if var.startswith(ENV_PREFIX):
            key = var[len(ENV_PREFIX):]
            if key.upper() not in by_upper:
                raise ConfigError(f"environment variable {var} names no config key")
            out[by_upper[key.upper()]] = value
    return out


def load(path: str | Path | None = None, overrides: dict[str, str] | None = None,
         environ=None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        # OSError propagates: unreadable files are I/O failures, not bad values
        cfg = apply(cfg, parse_text(Path(path).read_text(), str(path)))
    cfg = apply(cfg, env_values(environ))
    cfg = apply(cfg, overrides or {})
    return cfg.validate()


def dump(cfg: RunConfig) -> str:
    """Config file text that loads back to ``cfg``."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
