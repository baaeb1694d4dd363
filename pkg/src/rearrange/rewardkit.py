"""Stage machine, stage-aligned completion rewards, shaping terms and termination.

Every function works elementwise on scalars or on per-environment arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from rearrange.worldmodel import ACTIVE, ANCHOR, OBSTACLE, World, compose_poses, wrap_angle

PRESETS = ("base", "swr", "swr_td", "ours")


class Outcome(IntEnum):
    RUNNING = 0
    SUCCESS = 1
    OUTSIDE = 2
    COLLISION = 3
    STAGE_TIMEOUT = 4
    EPISODE_TIMEOUT = 5

    @property
    def label(self) -> str:
        return {
            0: "Running", 1: "Success", 2: "Outside", 3: "Collision", 4: "StageTimeout", 5: "EpisodeTimeout",
        }[int(self)]


@dataclass(frozen=True)
class RewardWeights:
    w_rbt: float = 1.0
    w_ref: float = 1.0
    w_reach: float = 10.0
    w_place: float = 10.0
    w_success: float = 10.0
    w_smooth: float = 0.01
    w_slow: float = 0.1
    eps0: float = 1e-6

    def __post_init__(self):
        vals = [getattr(self, f) for f in self.__dataclass_fields__]
        if not all(np.isfinite(vals)):
            raise ValueError("reward weights must be finite")
        if self.eps0 <= 0:
            raise ValueError("eps0 must be positive")


@dataclass(frozen=True)
class Thresholds:
    reach: float = 0.2
    align: float = 0.10
    yaw: float = 0.3
    vel: float = 0.05
    smooth: float = 0.1
    d_th: float = 0.5
    v_th: float = 0.2

    def __post_init__(self):
        for f in self.__dataclass_fields__:
            if not getattr(self, f) > 0:
                raise ValueError(f"threshold {f} must be positive")


@dataclass
class StageState:
    stage_idx: np.ndarray
    tau: np.ndarray
    g: np.ndarray
    T_s: int
    reach_latched: np.ndarray
    place_latched: np.ndarray
    prev_d_rbt: np.ndarray
    prev_d_ref: np.ndarray
    t_global: np.ndarray = field(default=None)

    @classmethod
    def initial(cls, n_env: int, T_s: int, d_rbt=0.0, d_ref=0.0) -> "StageState":
        z = np.zeros(n_env, np.int64)
        f = np.zeros(n_env, bool)
        return cls(
            stage_idx=z.copy(), tau=z.copy(), g=z.copy(), T_s=int(T_s), reach_latched=f.copy(),
            place_latched=f.copy(),
            prev_d_rbt=np.broadcast_to(np.asarray(d_rbt, float), n_env).copy(),
            prev_d_ref=np.broadcast_to(np.asarray(d_ref, float), n_env).copy(),
            t_global=z.copy(),
        )

    def copy(self) -> "StageState":
        return StageState(
            self.stage_idx.copy(), self.tau.copy(), self.g.copy(), self.T_s, self.reach_latched.copy(),
            self.place_latched.copy(), self.prev_d_rbt.copy(), self.prev_d_ref.copy(), self.t_global.copy(),
        )


@dataclass
class StageGeometry:
    """Distances and kinematics of the active object relative to robot and target."""

    p_rbt: np.ndarray  # (E,2) reach point on the robot
    p_act: np.ndarray  # (E,2)
    p_ref: np.ndarray  # (E,2)
    v_act: np.ndarray  # (E,2)
    yaw_err: np.ndarray  # (E,) wrapped by the active object's symmetry

    @property
    def d_rbt(self) -> np.ndarray:
        return np.linalg.norm(self.p_rbt - self.p_act, axis=-1)

    @property
    def d_ref(self) -> np.ndarray:
        return np.linalg.norm(self.p_act - self.p_ref, axis=-1)

    @classmethod
    def from_world(cls, world: World, stage_idx: int = 0, reach_offset: float = 0.145) -> "StageGeometry":
        active, rel = world.script.stages[stage_idx]
        sym = np.array([s.symmetry for s in world.task.shapes])
        return stage_geometry(
            world.robot_pose[None], world.obj_pose[None], world.obj_vel[None], np.array([active]),
            np.array([world.script.anchor_id]), rel.as_array()[None], sym, reach_offset,
        )


def symmetric_yaw_error(yaw, target_yaw, period):
    """Yaw error folded into (-period/2, period/2]; period 0 means continuous symmetry."""
    err = wrap_angle(np.asarray(yaw, float) - np.asarray(target_yaw, float))
    period = np.asarray(period, float)
    safe = np.where(period > 0, period, 1.0)
    folded = err - safe * np.round(err / safe)
    # np.round is half-to-even; push the -period/2 edge to +period/2
    folded = np.where(folded <= -safe / 2, folded + safe, folded)
    return np.where(period > 0, folded, 0.0)


def stage_geometry(robot_pose, obj_pose, obj_vel, active_id, anchor_id, rel_target, symmetry, reach_offset=0.145):
    rows = np.arange(robot_pose.shape[0])
    c, s = np.cos(robot_pose[:, 2]), np.sin(robot_pose[:, 2])
    p_rbt = robot_pose[:, :2] + reach_offset * np.stack([c, s], axis=1)
    act = obj_pose[rows, active_id]
    target = compose_poses(obj_pose[rows, anchor_id], rel_target)
    yaw_err = symmetric_yaw_error(act[:, 2], target[:, 2], np.asarray(symmetry)[active_id])
    return StageGeometry(p_rbt, act[:, :2].copy(), target[:, :2], obj_vel[rows, active_id, :2].copy(), yaw_err)


def time_factor(tau, T_s, eps0: float = 1e-6):
    """Fraction of stage budget remaining: (T_s - tau) / (T_s + eps0)."""
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau > T_s) or np.any(tau < 0):
        raise ValueError("tau must lie in [0, T_s]")
    eta = (T_s - tau) / (T_s + eps0)
    return float(eta) if eta.ndim == 0 else eta


def reach_condition(geom: StageGeometry, thresholds: Thresholds):
    return geom.d_rbt < thresholds.reach


def place_condition(geom: StageGeometry, thresholds: Thresholds):
    speed = np.linalg.norm(geom.v_act, axis=-1)
    return (geom.d_ref < thresholds.align) & (np.abs(geom.yaw_err) < thresholds.yaw) & (speed < thresholds.vel)


def reach_reward(geom: StageGeometry, stage: StageState, thresholds: Thresholds, eps0: float = 1e-6):
    """Stage-local time factor on the first step the robot is within reach; zero afterwards."""
    fire = reach_condition(geom, thresholds) & (stage.g == 0) & ~stage.reach_latched
    return np.where(fire, time_factor(stage.tau, stage.T_s, eps0), 0.0)


def place_reward(geom: StageGeometry, stage: StageState, thresholds: Thresholds, eps0: float = 1e-6):
    fire = place_condition(geom, thresholds) & (stage.g == 1) & ~stage.place_latched
    return np.where(fire, time_factor(stage.tau, stage.T_s, eps0), 0.0)


def progress_reward(geom: StageGeometry, stage: StageState, weights: RewardWeights):
    """Phase-gated decrease of robot-to-object (reach) or object-to-target (place) distance."""
    reach_part = weights.w_rbt * (stage.prev_d_rbt - geom.d_rbt) * (stage.g == 0)
    place_part = weights.w_ref * (stage.prev_d_ref - geom.d_ref) * (stage.g == 1)
    return reach_part + place_part


def smoothness_penalty(a_t, a_prev, eps_smooth: float = 0.1):
    """Quartic penalty on consecutive action changes above a threshold (signed, per channel)."""
    d = np.asarray(a_t, float) - np.asarray(a_prev, float)
    dv, dw = d[..., 0], d[..., 1]
    out = dv**4 * (dv > eps_smooth) + dw**4 * (dw > eps_smooth)
    return float(out) if np.ndim(out) == 0 else out


def slowdown_reward(geom: StageGeometry, thresholds: Thresholds):
    d = geom.d_ref
    g_d = (1.0 - d / thresholds.d_th) * (d < thresholds.d_th)
    g_v = np.maximum(-1.0, 1.0 - np.linalg.norm(geom.v_act, axis=-1) / thresholds.v_th)
    return g_d * g_v


@dataclass
class RewardComponents:
    reach_event: np.ndarray
    place_event: np.ndarray
    success: np.ndarray
    eta_stage: np.ndarray
    eta_global: np.ndarray
    progress: np.ndarray
    smooth: np.ndarray
    slow: np.ndarray

    def as_dict(self, i: int | None = None) -> dict:
        out = {}
        for k in self.__dataclass_fields__:
            v = np.asarray(getattr(self, k))
            v = v if i is None else v[i]
            out[k] = bool(v) if v.dtype == bool else float(v)
        return out


def total_reward(c: RewardComponents, weights: RewardWeights, preset: str = "ours", curriculum: str = "full"):
    """Combine components according to the credit-assignment preset."""
    if preset not in PRESETS:
        raise ValueError(f"unknown reward preset {preset!r}")
    success = weights.w_success * np.asarray(c.success, float)
    if preset == "base":
        return success
    if preset == "swr":
        eta = np.ones_like(np.asarray(c.eta_stage, float))
    elif preset == "swr_td":
        eta = np.asarray(c.eta_global, float)
    else:
        eta = np.asarray(c.eta_stage, float)
    r = weights.w_reach * eta * c.reach_event + c.progress + success
    if curriculum == "reach":
        return r
    return r + weights.w_place * eta * c.place_event - weights.w_smooth * c.smooth + weights.w_slow * c.slow


@dataclass
class StageEvents:
    reach: np.ndarray
    place: np.ndarray
    success: np.ndarray


def assign_roles(roles: np.ndarray, active_ids: np.ndarray, anchor_id: int, new_active: np.ndarray, mask=None):
    """Placed objects become obstacles and the next scripted object becomes active."""
    roles = roles.copy()
    mask = np.ones(len(roles), bool) if mask is None else mask
    rows = np.flatnonzero(mask)
    sub = roles[rows]
    sub[sub == ACTIVE] = OBSTACLE
    sub[:, anchor_id] = ANCHOR
    sub[np.arange(len(rows)), new_active[rows]] = ACTIVE
    roles[rows] = sub
    return roles


def update_stage(stage: StageState, geom: StageGeometry, thresholds: Thresholds, active_ids, roles, anchor_id: int = 0,
                 curriculum: str = "full"):
    """Advance the stage machine after a physics step.

    Returns (stage', roles', events).  A place event on the last stage is Success;
    under the reach curriculum the reach event completes the episode.
    """
    active_ids = np.asarray(active_ids)
    n_stages = len(active_ids)
    new = stage.copy()
    reach = reach_condition(geom, thresholds) & (stage.g == 0) & ~stage.reach_latched
    place = place_condition(geom, thresholds) & (stage.g == 1) & ~stage.place_latched
    new.g = np.where(reach, 1, stage.g)
    new.reach_latched = stage.reach_latched | reach
    new.tau = stage.tau + 1
    new.t_global = stage.t_global + 1
    if curriculum == "reach":
        success = reach.copy()
        return new, roles, StageEvents(reach, np.zeros_like(reach), success)
    success = place & (stage.stage_idx == n_stages - 1)
    advance = place & ~success
    new.place_latched = stage.place_latched | success
    new.stage_idx = np.where(advance, stage.stage_idx + 1, stage.stage_idx)
    new.tau = np.where(advance, 0, new.tau)
    new.g = np.where(advance, 0, new.g)
    new.reach_latched = np.where(advance, False, new.reach_latched)
    roles = roles
    if advance.any():
        nxt = active_ids[np.minimum(new.stage_idx, n_stages - 1)]
        roles = assign_roles(roles, active_ids, anchor_id, nxt, advance)
    return new, roles, StageEvents(reach, place, success)


def check_termination(success, robot_pose, arena_radius: float, collision, tau, T_s: int, t_global, episode_limit: int):
    """Outcome code per environment; Success > Collision > Outside > StageTimeout > EpisodeTimeout.

    A stage budget that runs out on the same step as the episode budget is reported
    as EpisodeTimeout.
    """
    success = np.asarray(success, bool)
    robot_pose = np.asarray(robot_pose, float)
    outside = np.hypot(robot_pose[..., 0], robot_pose[..., 1]) > arena_radius
    ep_out = np.asarray(t_global) >= episode_limit
    stage_out = (np.asarray(tau) >= T_s) & ~ep_out
    out = np.full(np.shape(success), Outcome.RUNNING, np.int64)
    for cond, code in (
        (ep_out, Outcome.EPISODE_TIMEOUT),
        (stage_out, Outcome.STAGE_TIMEOUT),
        (outside, Outcome.OUTSIDE),
        (np.asarray(collision, bool), Outcome.COLLISION),
        (success, Outcome.SUCCESS),
    ):
        out = np.where(cond, int(code), out)
    return out


def collision_flags(contact_flags: np.ndarray, roles: np.ndarray, exempt: np.ndarray | None = None) -> np.ndarray:
    """Robot or active object touching an obstacle, from (E, B, B) contact flags (body 0 = robot).

    ``exempt`` (E, N) masks objects whose contact with the robot is ignored,
    e.g. a box that was just placed while the pusher still rests against it.
    """
    obst = roles == OBSTACLE
    act = roles == ACTIVE
    obj = contact_flags[:, 1:, 1:]
    robot_obst = obst if exempt is None else obst & ~exempt
    robot_hit = (contact_flags[:, 0, 1:] & robot_obst).any(axis=1)
    act_hit = (obj & act[:, :, None] & obst[:, None, :]).any(axis=(1, 2))
    return robot_hit | act_hit


def default_stage_budget(episode_limit: int, n_stages: int) -> int:
    return max(1, episode_limit // max(1, n_stages))


__all__ = [
    "Outcome",
    "PRESETS",
    "RewardComponents",
    "RewardWeights",
    "StageGeometry",
    "StageState",
    "Thresholds",
    "check_termination",
    "place_reward",
    "progress_reward",
    "reach_reward",
    "replace",
    "slowdown_reward",
    "smoothness_penalty",
    "time_factor",
    "total_reward",
    "update_stage",
]
