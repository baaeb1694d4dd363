"""Deterministic planar rigid-body stepping for a differential-drive pusher robot."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from rearrange import _kernels as K
from rearrange.worldmodel import (
    ACTIVE,
    ANCHOR,
    DISC,
    OBSTACLE,
    Footprint,
    ObjectShape,
    World,
    pack_footprints,
)

V_MAX = 0.4
OMEGA_MAX = 2.84
V_MAX_REAL = 0.22

# body 0.14 x 0.14 centred on the pose, pusher 0.075 deep and 0.14 wide on the front face
BODY_HALF = 0.07
PUSHER_LENGTH = 0.075
ROBOT_FOOTPRINT = Footprint.rectangle(-BODY_HALF, BODY_HALF + PUSHER_LENGTH, -BODY_HALF, BODY_HALF)
PUSHER_TIP = BODY_HALF + PUSHER_LENGTH


class PhysicsError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SimClock:
    dt: float = 1.0 / 60.0
    decimation: int = 6
    episode_limit: int = 1000

    def __post_init__(self):
        if self.decimation < 1 or self.dt <= 0:
            raise ValueError("dt must be positive and decimation >= 1")

    @property
    def policy_dt(self) -> float:
        return self.dt * self.decimation


@dataclass(frozen=True)
class PhysicsParams:
    track_width: float = 0.16
    kp: float = 20.0
    kd: float = 1.0
    pass_through: bool = False
    mu_ground: float = 0.4
    mu_push: float = 0.3
    gravity: float = 9.81
    box_mass: float = 0.5
    robot_mass: float = 4.0
    v_max: float = V_MAX
    omega_max: float = OMEGA_MAX
    vel_iters: int = 8
    pos_iters: int = 6
    slop: float = 0.0005

    def __post_init__(self):
        if self.track_width <= 0:
            raise ValueError("track_width must be positive")
        if self.kp < 0 or self.kd < 0:
            raise ValueError("PD gains must be non-negative")

    def tau(self) -> float:
        """Time constant of the wheel-speed tracking loop."""
        return math.inf if self.kp == 0 else (1.0 + self.kd) / self.kp

    def pd_decay(self, dt: float) -> float:
        """Per-substep decay of the tracking error (0 in pass-through)."""
        if self.pass_through or math.isinf(self.kp):
            return 0.0
        return math.exp(-dt / self.tau())


@dataclass(frozen=True)
class ContactEvent:
    a_id: int  # -1 is the robot
    b_id: int
    kind: str


def action_to_command(a, params: PhysicsParams = PhysicsParams()):
    """Map a normalized action in [-1, 1]^2 to (v, omega); clamps silently."""
    a = np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0)
    return params.v_max * a[..., 0], params.omega_max * a[..., 1]


def command_to_wheels(v, omega, track_width: float = 0.16):
    if track_width <= 0:
        raise ValueError("track_width must be positive")
    half = omega * track_width / 2.0
    return v - half, v + half


def wheels_to_command(v_left, v_right, track_width: float = 0.16):
    return 0.5 * (v_left + v_right), (v_right - v_left) / track_width


def pd_track(target, current, gains=(20.0, 1.0), dt: float = 1.0 / 60.0, pass_through: bool = False):
    """First-order wheel-speed tracking: (1 + kd) w' = kp (target - w), discretized exactly."""
    target = np.asarray(target, dtype=np.float64)
    current = np.asarray(current, dtype=np.float64)
    kp, kd = gains
    if kp < 0 or kd < 0:
        raise ValueError("gains must be non-negative")
    if pass_through or math.isinf(kp):
        return target.copy()
    decay = math.exp(-dt * kp / (1.0 + kd))
    return target + (current - target) * decay


def _shape_inertia(shape: ObjectShape, mass: float) -> float:
    if shape.kind == "cube":
        return mass * shape.size**2 / 6.0
    if shape.kind == "cylinder":
        return mass * (shape.size / 2) ** 2 / 2.0
    return mass * shape.size**2 / 12.0


class BodyTable:
    """Per-task body constants packed for the kernels (robot is body 0)."""

    def __init__(self, shapes, params: PhysicsParams, robot_fp: Footprint = ROBOT_FOOTPRINT):
        fps = [robot_fp] + [Footprint.of_shape(s) for s in shapes]
        self.kind, self.nv, self.verts, self.rad = pack_footprints(fps)
        n = len(fps)
        self.inv_m = np.zeros(n)
        self.inv_i = np.zeros(n)
        self.fric_r = np.ones(n)
        self.inv_m[0] = 1.0 / params.robot_mass
        x0, x1 = robot_fp.vertices[:, 0].min(), robot_fp.vertices[:, 0].max()
        y0, y1 = robot_fp.vertices[:, 1].min(), robot_fp.vertices[:, 1].max()
        cx = 0.5 * (x0 + x1)
        i_robot = params.robot_mass * ((x1 - x0) ** 2 + (y1 - y0) ** 2) / 12.0 + params.robot_mass * cx**2
        self.inv_i[0] = 1.0 / i_robot
        for i, s in enumerate(shapes, start=1):
            self.inv_m[i] = 1.0 / params.box_mass
            self.inv_i[i] = 1.0 / _shape_inertia(s, params.box_mass)
            self.fric_r[i] = 0.75 * math.sqrt(s.area / math.pi)


def kernel_params(params: PhysicsParams, clock: SimClock) -> np.ndarray:
    p = np.zeros(K.N_PARAMS)
    p[K.P_DT] = clock.dt
    p[K.P_DECIM] = clock.decimation
    p[K.P_TRACK] = params.track_width
    p[K.P_PD_DECAY] = params.pd_decay(clock.dt)
    p[K.P_MU_GROUND] = params.mu_ground
    p[K.P_MU_PUSH] = params.mu_push
    p[K.P_GRAVITY] = params.gravity
    p[K.P_VEL_ITERS] = params.vel_iters
    p[K.P_POS_ITERS] = params.pos_iters
    p[K.P_SLOP] = params.slop
    return p


class BatchStepper:
    """Steps arrays of environments in place, optionally fanned over threads.

    Each environment is touched by exactly one worker per call, so results are
    independent of the worker count.
    """

    def __init__(self, shapes, params: PhysicsParams = PhysicsParams(), clock: SimClock = SimClock(), workers: int = 1):
        self.params = params
        self.clock = clock
        self.table = BodyTable(shapes, params)
        self.kparams = kernel_params(params, clock)
        self.workers = max(1, int(workers))
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

    def targets_from_actions(self, actions: np.ndarray) -> np.ndarray:
        v, w = action_to_command(actions, self.params)
        vl, vr = command_to_wheels(v, w, self.params.track_width)
        return np.stack([vl, vr], axis=-1)

    def step(self, robot_pose, robot_vel, wheels, obj_pose, obj_vel, targets) -> np.ndarray:
        """Advance all environments one policy step; returns (E, B, B) contact flags."""
        n_env = robot_pose.shape[0]
        nb = obj_pose.shape[1] + 1
        contacts = np.zeros((n_env, nb, nb), np.bool_)
        t = self.table
        args = (
            robot_pose, robot_vel, wheels, obj_pose, obj_vel, np.ascontiguousarray(targets, np.float64),
            t.kind, t.nv, t.verts, t.rad, t.inv_m, t.inv_i, t.fric_r, self.kparams, contacts,
        )
        if self._pool is None or n_env < 2:
            K.step_batch(*args, 0, n_env)
        else:
            bounds = np.linspace(0, n_env, self.workers + 1).astype(int)
            futs = [self._pool.submit(K.step_batch, *args, lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
            for f in futs:
                f.result()
        if not (np.isfinite(robot_pose).all() and np.isfinite(obj_pose).all() and np.isfinite(obj_vel).all()):
            raise PhysicsError("non-finite state after physics step")
        return contacts

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


def step_physics(world: World, applied_wheels, clock: SimClock = SimClock(), params: PhysicsParams = PhysicsParams()):
    """Advance a single world by one policy step toward ``applied_wheels``.

    Returns the new world and the contact events seen during the substeps.
    """
    if not (np.isfinite(world.robot_pose).all() and np.isfinite(world.obj_pose).all()):
        raise PhysicsError("non-finite state before physics step")
    w = world.copy()
    stepper = BatchStepper(w.task.shapes, params, clock)
    rp, rv, wh = w.robot_pose[None], w.robot_vel[None], w.wheels[None]
    op, ov = w.obj_pose[None], w.obj_vel[None]
    flags = stepper.step(rp, rv, wh, op, ov, np.asarray(applied_wheels, np.float64)[None])
    w.robot_pose, w.robot_vel, w.wheels = rp[0], rv[0], wh[0]
    w.obj_pose, w.obj_vel = op[0], ov[0]
    return w, contacts_from_flags(flags[0], w.roles)


def contact_kind(a: int, b: int, roles) -> str:
    """Classify an unordered pair; -1 denotes the robot."""
    if a > b:
        a, b = b, a
    if a == -1:
        r = roles[b]
        return {ACTIVE: "robot-active", OBSTACLE: "robot-obstacle", ANCHOR: "robot-anchor"}[int(r)]
    ra, rb = int(roles[a]), int(roles[b])
    if {ra, rb} == {ACTIVE, OBSTACLE}:
        return "active-obstacle"
    return "object-object"


def contacts_from_flags(flags: np.ndarray, roles) -> list[ContactEvent]:
    out = []
    nb = flags.shape[0]
    for i in range(nb):
        for j in range(i + 1, nb):
            if flags[i, j]:
                a, b = i - 1, j - 1
                out.append(ContactEvent(a, b, contact_kind(a, b, roles)))
    return out


def footprints_overlap(fa: Footprint, pa, fb: Footprint, pb, margin: float = 0.0) -> bool:
    """True when the footprints overlap or come closer than ``margin`` (SAT, exact for convex shapes)."""
    ka, nva, va, ra = pack_footprints([fa])
    kb, nvb, vb, rb = pack_footprints([fb])
    d = K.contact_query(
        np.asarray(pa, np.float64), ka[0], nva[0], va[0], ra[0],
        np.asarray(pb, np.float64), kb[0], nvb[0], vb[0], rb[0],
    )[0]
    if margin <= 0:
        return d > 0.0
    return d > -margin


def query_collisions(world: World, params: PhysicsParams = PhysicsParams()) -> list[ContactEvent]:
    """Current overlapping pairs by separating-axis tests on the planar footprints."""
    table = BodyTable(world.task.shapes, params)
    pose = np.vstack([world.robot_pose[None], world.obj_pose])
    depth = np.zeros((len(pose), len(pose)))
    K.overlap_matrix(pose, table.kind, table.nv, table.verts, table.rad, depth)
    return contacts_from_flags(depth > 0.0, world.roles)


def max_penetration(world: World, params: PhysicsParams = PhysicsParams()) -> float:
    table = BodyTable(world.task.shapes, params)
    pose = np.vstack([world.robot_pose[None], world.obj_pose])
    depth = np.zeros((len(pose), len(pose)))
    K.overlap_matrix(pose, table.kind, table.nv, table.verts, table.rad, depth)
    return float(max(0.0, depth.max()))


__all__ = [
    "BatchStepper",
    "ContactEvent",
    "DISC",
    "PhysicsError",
    "PhysicsParams",
    "ROBOT_FOOTPRINT",
    "SimClock",
    "action_to_command",
    "command_to_wheels",
    "footprints_overlap",
    "pd_track",
    "query_collisions",
    "step_physics",
]
