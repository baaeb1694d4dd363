"""INI experiment configs.

Sections map onto the dataclasses they configure; every key must name a field.
Angles in ``[camera]`` are given in degrees.  ``canonical_text`` renders the
fully resolved config (defaults included) and is what checkpoints hash.
"""
from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field, fields, replace

from rearrange.agents.distill import DistillConfig
from rearrange.agents.ppo import PPOHyper
from rearrange.egoview import CameraModel
from rearrange.envbatch import EnvConfig
from rearrange.physics import PhysicsParams, SimClock
from rearrange.rewardkit import RewardWeights, Thresholds
from rearrange.worldmodel import ObjectShape, TaskSpec

CAMERA_DEGREES = ("fov_h", "fov_v", "pitch")
NETS = {"full": {}, "desk": {"hidden": (64, 64), "widths": (32, 64)}}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSection:
    formation: str = "pair"
    n_objects: int = 2
    spacing: float = 0.30
    arena_radius: float = 1.5
    placement_radius: float = 1.0
    keypoints: int = 8
    shapes: str = "cube"  # comma list, one entry per object or a single kind for all
    shape_size: float = 0.15
    shape_height: float = 0.15


@dataclass(frozen=True)
class RewardSection:
    preset: str = "ours"
    curriculum: str = "full"
    stage_budget: int = 0  # 0: episode_limit // n_stages


@dataclass(frozen=True)
class EnvSection:
    n_envs: int = 64
    workers: int = 1


@dataclass(frozen=True)
class TrainSection:
    steps: int = 200_000
    net: str = "desk"


@dataclass(frozen=True)
class StudentSection:
    kind: str = "depth"  # depth | keypoint
    noise_scale: float = 0.005
    dropout: float = 0.02
    block: int = 3


@dataclass
class ExperimentConfig:
    task: TaskSection = field(default_factory=TaskSection)
    camera: CameraModel = field(default_factory=CameraModel)
    physics: PhysicsParams = field(default_factory=PhysicsParams)
    clock: SimClock = field(default_factory=SimClock)
    reward: RewardSection = field(default_factory=RewardSection)
    weights: RewardWeights = field(default_factory=RewardWeights)
    thresholds: Thresholds = field(default_factory=Thresholds)
    env: EnvSection = field(default_factory=EnvSection)
    train: TrainSection = field(default_factory=TrainSection)
    ppo: PPOHyper = field(default_factory=lambda: PPOHyper(minibatches=8))
    distill: DistillConfig = field(default_factory=DistillConfig)
    student: StudentSection = field(default_factory=StudentSection)

    def task_spec(self) -> TaskSpec:
        t = self.task
        kinds = [k.strip() for k in t.shapes.split(",") if k.strip()]
        if len(kinds) == 1:
            kinds = kinds * t.n_objects
        if len(kinds) != t.n_objects:
            raise ConfigError("task.shapes needs one kind or one per object")
        shapes = tuple(ObjectShape(k, t.shape_size, t.shape_height) for k in kinds)
        return TaskSpec(t.formation, t.n_objects, t.spacing, t.arena_radius, shapes, t.placement_radius,
                        keypoints=t.keypoints)

    def env_config(self, seed: int = 0, **overrides) -> EnvConfig:
        cfg = EnvConfig(
            task=self.task_spec(), camera=self.camera, physics=self.physics, clock=self.clock,
            weights=self.weights, thresholds=self.thresholds, preset=self.reward.preset,
            curriculum=self.reward.curriculum, stage_budget=self.reward.stage_budget or None,
            n_envs=self.env.n_envs, seed=seed, workers=self.env.workers,
        )
        return replace(cfg, **overrides) if overrides else cfg

    def net_kwargs(self) -> dict:
        if self.train.net not in NETS:
            raise ConfigError(f"unknown net {self.train.net!r}; choose from {sorted(NETS)}")
        return dict(NETS[self.train.net])


def _coerce(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            v = raw.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(","))
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def _section_values(obj, degrees=()) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if f.name in degrees:
            v = math.degrees(v)
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        out[f.name] = repr(v) if isinstance(v, float) else str(v)
    return out


def _apply(obj, items: dict, section: str, degrees=()):
    names = {f.name for f in fields(obj)}
    kw = {}
    for k, raw in items.items():
        if k not in names:
            raise ConfigError(f"unknown key [{section}] {k}")
        val = _coerce(f"[{section}] {k}", raw, getattr(obj, k))
        if k in degrees:
            val = math.radians(val)
        kw[k] = val
    try:
        return replace(obj, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = ExperimentConfig()
    known = {f.name for f in fields(cfg)}
    for section in cp.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
        deg = CAMERA_DEGREES if section == "camera" else ()
        setattr(cfg, section, _apply(getattr(cfg, section), dict(cp[section]), section, deg))
    try:
        cfg.env_config()  # validate cross-field constraints early
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.net_kwargs()
    return cfg


def load_config(path=None) -> tuple[ExperimentConfig, str]:
    """Returns the parsed config and its canonical text; ``None`` gives the defaults."""
    if path is None:
        cfg = ExperimentConfig()
    else:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        cfg = parse_config(text)
    return cfg, canonical_text(cfg)


def canonical_text(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for f in fields(cfg):
        deg = CAMERA_DEGREES if f.name == "camera" else ()
        cp[f.name] = _section_values(getattr(cfg, f.name), deg)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
