"""Experiment configuration: one JSON file with sim/task/mppi/dmpo/ppo/eval sections.

Keys starting with ``_`` are comments and are ignored. Missing keys take the
dataclass defaults; unknown keys are a validation error.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Tuple

from .dmpo import DmpoConfig
from .mppi import MppiConfig
from .sim import DisturbanceSpec, SimParams, fan_wind_field
from .task import CostWeights, TaskConfig
from .trainer import PpoConfig

CONTROLLERS = ("mppi", "dmpo", "e2e")
TASKS = ("zigzag", "zigzag_yaw")
DISTURBANCES = ("none", "wind_drag")
SAMPLE_COUNTS = (64, 128, 256, 512, 1024, 2048, 4096, 8192)
SEED_ENV = "DMPO_SEED"

# unseen at training time: three-fan wind and quadratic drag from a hanging plate; sized so that
# MPPI at N=256 loses about 11 % on validation trajectories
WIND_DRAG_COEFF = 0.005    # kg/m
WIND_SPEED = 2.0           # m/s at the fan face


class ConfigError(ValueError):
    """Configuration failed validation."""


def disturbed_plant(nominal: SimParams, disturbance: str) -> SimParams:
    if disturbance == "none":
        return nominal
    if disturbance == "wind_drag":
        dist = DisturbanceSpec(drag_coeff=WIND_DRAG_COEFF, wind_field=fan_wind_field(speed=WIND_SPEED))
        return replace(nominal, disturbance=dist)
    raise ConfigError(f"unknown disturbance {disturbance!r}; expected one of {DISTURBANCES}")


@dataclass(frozen=True)
class ExperimentConfig:
    controller: str = "mppi"
    N: int = 256
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    task: str = "zigzag"
    disturbance: str = "none"
    checkpoint: Optional[str] = None
    seed: int = 0                      # training seed
    sim: SimParams = field(default_factory=SimParams)
    task_cfg: TaskConfig = field(default_factory=TaskConfig)
    mppi: MppiConfig = field(default_factory=MppiConfig)
    dmpo: DmpoConfig = field(default_factory=DmpoConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"controller must be one of {CONTROLLERS}, got {self.controller!r}")
        if self.N not in SAMPLE_COUNTS:
            raise ConfigError(f"N must be one of {SAMPLE_COUNTS}, got {self.N}")
        if len(self.seeds) == 0:
            raise ConfigError("seeds must be non-empty")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.disturbance not in DISTURBANCES:
            raise ConfigError(f"disturbance must be one of {DISTURBANCES}, got {self.disturbance!r}")
        if self.task_cfg.yaw_flips != (self.task == "zigzag_yaw"):
            object.__setattr__(self, "task_cfg", replace(self.task_cfg, yaw_flips=self.task == "zigzag_yaw"))
        if self.mppi.N != self.N:
            object.__setattr__(self, "mppi", replace(self.mppi, N=self.N))

    @property
    def plant(self) -> SimParams:
        return disturbed_plant(self.sim, self.disturbance)

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        sim = self.sim.to_dict()
        sim.pop("disturbance", None)
        task = self.task_cfg.to_dict()
        task.pop("yaw_flips")
        task["name"] = self.task
        mppi = self.mppi.to_dict()
        mppi.pop("N")
        return {
            "seed": self.seed,
            "sim": sim,
            "task": task,
            "mppi": mppi,
            "dmpo": self.dmpo.to_dict(),
            "ppo": self.ppo.to_dict(),
            "eval": {"controller": self.controller, "N": self.N, "seeds": list(self.seeds),
                     "disturbance": self.disturbance, "checkpoint": self.checkpoint},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = _strip_comments(d)
        _check_keys("top level", d, {"seed", "sim", "task", "mppi", "dmpo", "ppo", "eval"})
        try:
            sim_d = dict(d.get("sim", {}))
            _check_keys("sim", sim_d, {f.name for f in fields(SimParams)} - {"disturbance"})
            sim = SimParams.from_dict(sim_d) if sim_d else SimParams()

            task_d = dict(d.get("task", {}))
            task_name = task_d.pop("name", "zigzag")
            _check_keys("task", task_d, {f.name for f in fields(TaskConfig)} - {"yaw_flips"})
            if "weights" in task_d:
                _check_keys("task.weights", task_d["weights"], {f.name for f in fields(CostWeights)})
            task_cfg = TaskConfig.from_dict(task_d)

            mppi_d = dict(d.get("mppi", {}))
            _check_keys("mppi", mppi_d, {f.name for f in fields(MppiConfig)} - {"N"})
            ev = dict(d.get("eval", {}))
            _check_keys("eval", ev, {"controller", "N", "seeds", "disturbance", "checkpoint"})
            N = int(ev.get("N", 256))
            mppi = MppiConfig.from_dict(dict(mppi_d, N=N))

            dmpo_d = d.get("dmpo", {})
            _check_keys("dmpo", dmpo_d, {f.name for f in fields(DmpoConfig)})
            ppo_d = d.get("ppo", {})
            _check_keys("ppo", ppo_d, {f.name for f in fields(PpoConfig)})

            return cls(controller=ev.get("controller", "mppi"), N=N,
                       seeds=tuple(int(s) for s in ev.get("seeds", (0, 1, 2, 3, 4))),
                       task=task_name, disturbance=ev.get("disturbance", "none"),
                       checkpoint=ev.get("checkpoint"), seed=int(d.get("seed", 0)), sim=sim,
                       task_cfg=task_cfg, mppi=mppi, dmpo=DmpoConfig(**dmpo_d), ppo=PpoConfig(**ppo_d))
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc


def _strip_comments(d):
    if isinstance(d, dict):
        return {k: _strip_comments(v) for k, v in d.items() if not k.startswith("_")}
    return d


def _check_keys(section: str, d: dict, allowed: set) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {section}: {sorted(extra)}")


def load_config(path, env=None) -> ExperimentConfig:
    """Read a JSON config; ``DMPO_SEED`` in ``env`` (default os.environ) overrides ``seed``."""
    env = os.environ if env is None else env
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = ExperimentConfig.from_dict(raw)
    if env.get(SEED_ENV):
        try:
            cfg = cfg.with_(seed=int(env[SEED_ENV]))
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    return cfg


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
