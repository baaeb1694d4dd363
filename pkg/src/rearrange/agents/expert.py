"""Go-behind-and-push controller with full state access.

Boxes are pushed along the axes of the target frame, so a cube pushed flush
against the pusher arrives with its yaw congruent to the target yaw.  A plan is
a short axis-aligned polyline for the box, chosen to keep the box and the robot
clear of every other object.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from rearrange.physics import OMEGA_MAX, PUSHER_TIP, V_MAX
from rearrange.worldmodel import World, compose_poses, wrap_angle

ROBOT_RADIUS = math.hypot(PUSHER_TIP, 0.07)


@dataclass
class ExpertParams:
    standoff: float = 0.32  # staging distance behind the box centre
    max_lateral: float = 0.05  # re-plan when the box leaves the push line by more
    heading_tol: float = 0.1
    slow_radius: float = 0.5
    slow_speed: float = 0.1
    leg_tol: float = 0.02
    final_tol: float = 0.012
    margin: float = 0.04
    arena_margin: float = 0.2
    k_heading: float = 3.0
    k_lateral: float = 2.5


@dataclass
class ExpertMemory:
    key: tuple = ()
    plan: list = field(default_factory=list)  # box waypoints (world xy)
    leg: int = 0
    start: np.ndarray | None = None  # box position when the plan was made
    pushing: bool = False
    retreat: int = 0


def _rot(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def _seg_dist(p, a, b) -> float:
    ab = b - a
    L2 = float(ab @ ab)
    t = 0.0 if L2 == 0 else min(1.0, max(0.0, float((p - a) @ ab) / L2))
    return float(np.linalg.norm(a + t * ab - p))


def _bound(shape) -> float:
    return shape.bounding_radius


def plan_box_path(box_xy, box_r, target_pose, others, arena_radius, prm: ExpertParams):
    """Cheapest feasible axis-aligned polyline from the box to the target.

    ``others`` is a list of (xy, radius) for every object except the box.
    """
    R = _rot(target_pose[2])
    o = target_pose[:2]
    b = R.T @ (box_xy - o)
    cand = [
        [(0.0, b[1]), (0.0, 0.0)],
        [(b[0], 0.0), (0.0, 0.0)],
    ]
    for s in (0.45, -0.45):
        cand.append([(b[0], s), (0.0, s), (0.0, 0.0)])
        cand.append([(s, b[1]), (s, 0.0), (0.0, 0.0)])
    best, best_cost = None, math.inf
    fallback, fallback_cost = None, math.inf
    for c in cand:
        pts = [b] + [np.array(p) for p in c]
        # drop degenerate legs
        keep = [pts[0]]
        for p in pts[1:]:
            if np.linalg.norm(p - keep[-1]) > 1e-3:
                keep.append(p)
        if len(keep) == 1:
            return [o.copy()]
        world = [o + R @ p for p in keep]
        cost = sum(np.linalg.norm(world[i + 1] - world[i]) for i in range(len(world) - 1)) + 0.3 * (len(world) - 1)
        ok = _feasible(world, box_r, others, arena_radius, prm)
        if ok and cost < best_cost:
            best, best_cost = world, cost
        if cost < fallback_cost:
            fallback, fallback_cost = world, cost
    chosen = best if best is not None else fallback
    return chosen[1:]


def _feasible(world_pts, box_r, others, arena_radius, prm: ExpertParams) -> bool:
    for a, b in zip(world_pts[:-1], world_pts[1:]):
        u = (b - a) / np.linalg.norm(b - a)
        r0 = a - prm.standoff * u
        r1 = b - (PUSHER_TIP + box_r * 0.75) * u
        for xy, rad in others:
            if _seg_dist(xy, a, b) < box_r + rad + prm.margin:
                return False
            if _seg_dist(xy, r0, r1) < ROBOT_RADIUS + rad + prm.margin:
                return False
        for p in (r0, r1, b):
            if np.hypot(*p) > arena_radius - prm.arena_margin:
                return False
    return True


def _drive_to(robot_pose, goal_xy, final_heading, prm: ExpertParams, speed: float = V_MAX):
    """Point-and-go controller returning (v, omega)."""
    d = goal_xy - robot_pose[:2]
    dist = float(np.hypot(*d))
    if dist < 0.02:
        if final_heading is None:
            return 0.0, 0.0
        return 0.0, prm.k_heading * wrap_angle(final_heading - robot_pose[2])
    e = wrap_angle(math.atan2(d[1], d[0]) - robot_pose[2])
    if abs(e) > 2.4 and dist < 0.25:
        # short hop behind us: back up
        e = wrap_angle(e - math.pi)
        return -min(speed, 1.5 * dist) * math.cos(e), prm.k_heading * e
    if abs(e) > 0.6:
        return 0.0, prm.k_heading * e
    return min(speed, 1.5 * dist) * math.cos(e), prm.k_heading * e


def _avoid(robot_xy, goal_xy, obstacles):
    """Replace the goal by a tangent waypoint around the nearest blocking obstacle."""
    best, best_t = None, math.inf
    seg = goal_xy - robot_xy
    L = float(np.hypot(*seg))
    if L < 1e-9:
        return goal_xy
    u = seg / L
    for c, rc in obstacles:
        rel = c - robot_xy
        t = float(rel @ u)
        if t <= 0 or t >= L + rc:
            continue
        if np.hypot(*(goal_xy - c)) < rc:
            continue
        if _seg_dist(c, robot_xy, goal_xy) < rc and t < best_t:
            best, best_t = (c, rc), t
    if best is None:
        return goal_xy
    c, rc = best
    side = robot_xy + u * float((c - robot_xy) @ u) - c
    n = np.hypot(*side)
    side = np.array([-u[1], u[0]]) if n < 1e-6 else side / n
    # tangent-ish point slightly outside the clearance circle, biased toward the goal
    w = c + (rc + 0.06) * side
    if np.hypot(*(w - robot_xy)) < 0.05:
        w = w + 0.15 * u
    return w


class ScriptedExpert:
    """Stateful expert over the environments of a :class:`VecEnv`."""

    def __init__(self, params: ExpertParams | None = None):
        self.prm = params or ExpertParams()
        self.mem: dict[int, ExpertMemory] = {}

    def __call__(self, env, batch=None) -> np.ndarray:
        out = np.zeros((env.n_envs, 2))
        radii = np.array([_bound(s) for s in env.task.shapes])
        for i in range(env.n_envs):
            stage_idx = int(env.stage.stage_idx[i])
            key = (int(env.episode[i]), stage_idx)
            m = self.mem.get(i)
            if m is None or m.key != key:
                m = self.mem[i] = ExpertMemory(key=key)
            active = int(env.active_ids[stage_idx])
            target = compose_poses(env.obj_pose[i, env.anchor_id], env.rel_targets[stage_idx])
            out[i] = self.control(
                env.robot_pose[i], env.obj_pose[i], active, target, radii, env.task.arena_radius, m,
                bool(env.stage.g[i]),
            )
        return out

    def control(self, robot_pose, obj_pose, active, target, radii, arena_radius, m: ExpertMemory, reached=True):
        prm = self.prm
        box = obj_pose[active, :2]
        box_r = radii[active]
        others = [(obj_pose[j, :2], radii[j]) for j in range(len(obj_pose)) if j != active]

        if not m.plan:
            m.plan = plan_box_path(box, box_r, target, others, arena_radius, prm)
            m.leg, m.pushing, m.start = 0, False, box.copy()
        end = m.plan[m.leg]
        start = m.plan[m.leg - 1] if m.leg > 0 else m.start
        last = m.leg == len(m.plan) - 1
        u = end - start
        n = float(np.hypot(*u))
        u = u / n if n > 1e-9 else np.array([math.cos(target[2]), math.sin(target[2])])
        remaining = float((end - box) @ u)
        lateral = float(u[0] * (box[1] - start[1]) - u[1] * (box[0] - start[0]))

        if m.retreat > 0:
            m.retreat -= 1
            if m.retreat == 0 and np.hypot(*(box - target[:2])) > 0.06:
                self._replan(m)
            return np.array([-0.5, 0.0])

        tol = prm.final_tol if last else prm.leg_tol
        if remaining < tol:
            if last:
                m.retreat = 4
                return np.array([-0.5, 0.0])
            m.leg += 1
            m.pushing = False
            return self.control(robot_pose, obj_pose, active, target, radii, arena_radius, m, reached)
        if abs(lateral) > prm.max_lateral:
            self._replan(m)
            return self.control(robot_pose, obj_pose, active, target, radii, arena_radius, m, reached)

        heading = math.atan2(u[1], u[0])
        r = robot_pose[:2] - box
        along = float(r @ u)
        side = float(u[0] * r[1] - u[1] * r[0])
        he = wrap_angle(robot_pose[2] - heading)
        if m.pushing:
            if not (-prm.standoff - 0.13 <= along <= -0.18 and abs(side) < 0.06 and abs(he) < 0.35):
                m.pushing = False
        elif -prm.standoff - 0.03 <= along <= -0.18 and abs(side) < 0.03 and abs(he) < prm.heading_tol:
            m.pushing = True

        if m.pushing:
            speed = V_MAX
            if last and remaining < prm.slow_radius:
                speed = prm.slow_speed
            if remaining < 0.08:
                speed = min(speed, max(0.03, 1.2 * remaining))
            desired = heading - np.clip(prm.k_lateral * (lateral + 0.5 * side), -0.35, 0.35)
            omega = prm.k_heading * wrap_angle(desired - robot_pose[2])
            return self._to_action(speed, omega)

        stage_pt = box - prm.standoff * u
        obstacles = [(box, box_r + ROBOT_RADIUS + 0.03)] + [(xy, rad + ROBOT_RADIUS + 0.03) for xy, rad in others]
        goal = _avoid(robot_pose[:2], stage_pt, obstacles)
        final = heading if goal is stage_pt else None
        v, w = _drive_to(robot_pose, goal, final, prm)
        return self._to_action(v, w)

    @staticmethod
    def _replan(m: ExpertMemory):
        m.plan = []
        m.leg = 0
        m.pushing = False
        m.start = None

    @staticmethod
    def _to_action(v, omega):
        return np.clip(np.array([v / V_MAX, omega / OMEGA_MAX]), -1.0, 1.0)


def scripted_expert(world: World, stage: int = 0, memory: ExpertMemory | None = None, expert: ScriptedExpert | None = None):
    """Action for a single world at ``stage``; pass ``memory`` to keep the plan between calls."""
    expert = expert or ScriptedExpert()
    memory = memory if memory is not None else ExpertMemory()
    active, rel = world.script.stages[stage]
    target = compose_poses(world.obj_pose[world.script.anchor_id], rel.as_array())
    radii = np.array([s.bounding_radius for s in world.task.shapes])
    return expert.control(world.robot_pose, world.obj_pose, active, target, radii, world.task.arena_radius, memory)
