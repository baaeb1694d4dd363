"""Frustum-masked keypoint observations with center-gated reference visibility.

All point functions broadcast over leading batch dimensions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from rearrange.worldmodel import ACTIVE, ANCHOR, OBSTACLE, World, canonical_keypoints, compose_poses, transform_points

MASK_VALUE = (-10.0, -10.0, -10.0)


@dataclass(frozen=True)
class CameraModel:
    fov_h: float = math.radians(70.0)
    fov_v: float = math.radians(60.0)
    d_min: float = 0.15
    d_max: float = 5.0
    mask_value: tuple = MASK_VALUE
    u_gate: float = 0.5
    v_gate: float = 0.5
    height: float = 0.20
    pitch: float = math.radians(11.5)  # positive pitches the optical axis down
    offset_x: float = 0.0
    fov_masking: bool = True
    cgv: bool = True
    n_obs_max: int = 3
    width: int = 104
    height_px: int = 90

    def __post_init__(self):
        if not (0 < self.fov_h < math.pi and 0 < self.fov_v < math.pi):
            raise ValueError("fields of view must lie in (0, pi)")
        if not (0 <= self.d_min < self.d_max):
            raise ValueError("need 0 <= d_min < d_max")
        if not (0 < self.u_gate <= 1 and 0 < self.v_gate <= 1):
            raise ValueError("gates must lie in (0, 1]")

    @property
    def tan_h(self) -> float:
        return math.tan(self.fov_h / 2)

    @property
    def tan_v(self) -> float:
        return math.tan(self.fov_v / 2)

    @property
    def eps(self) -> np.ndarray:
        return np.asarray(self.mask_value, dtype=np.float64)


CAMERA_PRESETS = {
    "sim": CameraModel(),
    "main_text": CameraModel(fov_h=math.radians(69.0)),
}


def to_camera_frame(robot_pose, cam_height: float, p_world, pitch: float = 0.0, offset_x: float = 0.0) -> np.ndarray:
    """World points into the camera-aligned frame (x forward, y left, z up)."""
    pose = np.asarray(robot_pose, dtype=np.float64)
    p = np.asarray(p_world, dtype=np.float64)
    c = np.cos(pose[..., 2])
    s = np.sin(pose[..., 2])
    # pose arrays broadcast against the point axis
    while c.ndim < p.ndim - 1:
        c, s = c[..., None], s[..., None]
        pose = pose[..., None, :]
    cx = pose[..., 0] + c * offset_x
    cy = pose[..., 1] + s * offset_x
    dx = p[..., 0] - cx
    dy = p[..., 1] - cy
    dz = p[..., 2] - cam_height
    xl = c * dx + s * dy
    yl = -s * dx + c * dy
    if pitch == 0.0:
        return np.stack([xl, yl, dz], axis=-1)
    cp, sp = math.cos(pitch), math.sin(pitch)
    return np.stack([cp * xl - sp * dz, yl, sp * xl + cp * dz], axis=-1)


def camera_to_world(robot_pose, cam: CameraModel, p_cam) -> np.ndarray:
    """Inverse of :func:`to_camera_frame` for a single pose."""
    x, y, z = np.moveaxis(np.asarray(p_cam, dtype=np.float64), -1, 0)
    cp, sp = math.cos(cam.pitch), math.sin(cam.pitch)
    xl = cp * x + sp * z
    zl = -sp * x + cp * z
    c, s = math.cos(robot_pose[2]), math.sin(robot_pose[2])
    ox = robot_pose[0] + c * cam.offset_x
    oy = robot_pose[1] + s * cam.offset_x
    return np.stack([ox + c * xl - s * y, oy + s * xl + c * y, zl + cam.height], axis=-1)


def cam_frame(robot_pose, cam: CameraModel, p_world) -> np.ndarray:
    return to_camera_frame(robot_pose, cam.height, p_world, cam.pitch, cam.offset_x)


def visible(p_r, cam: CameraModel):
    p = np.asarray(p_r, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    out = (x > 0) & (np.abs(y) <= x * cam.tan_h) & (np.abs(z) <= x * cam.tan_v) & (x >= cam.d_min) & (x <= cam.d_max)
    return bool(out) if out.ndim == 0 else out


def project_uv(p_r, cam: CameraModel):
    p = np.asarray(p_r, dtype=np.float64)
    x = p[..., 0]
    if np.any(x <= 0):
        raise ValueError("projection needs x > 0")
    u = p[..., 1] / (x * cam.tan_h)
    v = -p[..., 2] / (x * cam.tan_v)
    return u, v


def mask_points(p_r, cam: CameraModel) -> np.ndarray:
    """Replace camera-frame points outside the frustum by the mask value."""
    p = np.asarray(p_r, dtype=np.float64)
    vis = visible(p, cam)
    return np.where(np.asarray(vis)[..., None], p, cam.eps)


def mask_keypoints(points_world, robot_pose, cam: CameraModel) -> np.ndarray:
    return mask_points(cam_frame(robot_pose, cam, points_world), cam)


def cgv_gate(anchor_centroid_world, robot_pose, cam: CameraModel):
    """Anchor centroid inside the frustum and within the central image-plane window."""
    p = cam_frame(robot_pose, cam, anchor_centroid_world)
    vis = np.asarray(visible(p, cam))
    x = np.where(vis, p[..., 0], 1.0)
    u = p[..., 1] / (x * cam.tan_h)
    v = -p[..., 2] / (x * cam.tan_v)
    gate = vis & (np.abs(u) <= cam.u_gate) & (np.abs(v) <= cam.v_gate)
    return bool(gate) if gate.ndim == 0 else gate


@dataclass
class GroupedObservation:
    act: np.ndarray
    anc: np.ndarray
    obs: np.ndarray
    ref: np.ndarray
    prev_action: np.ndarray
    obs_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.act.ravel(), self.anc.ravel(), self.obs.ravel(), self.ref.ravel(), self.prev_action])


class KeypointTable:
    """Canonical keypoints for every object of a task, stacked as (N, k, 3)."""

    def __init__(self, shapes, k: int = 8):
        self.k = k
        self.local = np.stack([canonical_keypoints(s, k) for s in shapes])

    def world(self, obj_pose) -> np.ndarray:
        return transform_points(np.asarray(obj_pose), self.local)


def assemble_batch(
    robot_pose, obj_pose, roles, active_id, anchor_id, rel_target, prev_action,
    cam: CameraModel, table: KeypointTable,
):
    """Vectorized observation assembly over E environments.

    Returns arrays act (E,k,3), anc (E,k,3), obs (E,n_obs_max*k,3), ref (E,k,3),
    prev_action (E,2).
    """
    robot_pose = np.asarray(robot_pose, np.float64)
    n_env, n_obj = roles.shape
    k = table.k
    eps = cam.eps
    rows = np.arange(n_env)
    pts_w = table.world(obj_pose)  # (E,N,k,3)
    pts_c = cam_frame(robot_pose[:, None, :], cam, pts_w)
    masked = mask_points(pts_c, cam) if cam.fov_masking else pts_c

    act = masked[rows, active_id]
    anc = masked[rows, anchor_id]

    # obstacles: ascending robot distance, ties by id, padded with the mask value
    d = np.hypot(obj_pose[..., 0] - robot_pose[:, None, 0], obj_pose[..., 1] - robot_pose[:, None, 1])
    d = np.where(roles == OBSTACLE, d, np.inf)
    order = np.lexsort((np.broadcast_to(np.arange(n_obj), d.shape), d), axis=-1)
    m = cam.n_obs_max
    obs = np.broadcast_to(eps, (n_env, m, k, 3)).copy()
    ids = np.full((n_env, m), -1, np.int64)
    for slot in range(min(m, n_obj)):
        idx = order[:, slot]
        ok = np.isfinite(d[rows, idx])
        obs[ok, slot] = masked[rows[ok], idx[ok]]
        ids[ok, slot] = idx[ok]
    obs = obs.reshape(n_env, m * k, 3)

    active_shape_pts = table.local[active_id]  # (E,k,3)
    target = compose_poses(obj_pose[rows, anchor_id], rel_target)
    ref_w = transform_points(target, active_shape_pts)
    ref_c = cam_frame(robot_pose[:, None, :], cam, ref_w)
    if not cam.fov_masking:
        ref = ref_c
    else:
        ref = mask_points(ref_c, cam)
        if cam.cgv:
            z_mid = table.local[anchor_id, :, 2].mean(axis=-1)
            anchor_c = np.column_stack([obj_pose[rows, anchor_id, :2], z_mid])
            gate = np.asarray(cgv_gate(anchor_c, robot_pose, cam)).reshape(n_env)
            ref = np.where(gate[:, None, None], ref, eps)
    return act, anc, obs, ref, np.asarray(prev_action, np.float64).reshape(n_env, 2), ids


def assemble_observation(world: World, robot_pose, cam: CameraModel, prev_action, stage) -> GroupedObservation:
    """Grouped, masked keypoint observation for one world.

    ``stage`` is a stage index into the world's script or a (active_id, rel_target) pair.
    """
    if isinstance(stage, (int, np.integer)):
        active_id, rel = world.script.stages[int(stage)]
    else:
        active_id, rel = stage
    rel = rel.as_array() if hasattr(rel, "as_array") else np.asarray(rel, np.float64)
    roles = world.roles.copy()
    roles[roles == ACTIVE] = OBSTACLE
    roles[world.script.anchor_id] = ANCHOR
    roles[active_id] = ACTIVE
    table = KeypointTable(world.task.shapes, world.task.keypoints)
    act, anc, obs, ref, prev, ids = assemble_batch(
        np.asarray(robot_pose, np.float64)[None],
        world.obj_pose[None],
        roles[None],
        np.array([active_id]),
        np.array([world.script.anchor_id]),
        rel[None],
        np.asarray(prev_action, np.float64)[None],
        cam,
        table,
    )
    return GroupedObservation(act[0], anc[0], obs[0], ref[0], prev[0], ids[0])
