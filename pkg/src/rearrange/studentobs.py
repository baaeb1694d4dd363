"""Synthetic egocentric frames and the student's group-depth observation.

Pipeline: ray-cast RGB/depth/instance frame -> HSV segmentation into per-instance
masks -> optional sensor noise -> median fill per instance -> three depth layers
(active, anchor, obstacles).

Image convention: row 0 is the top of the image, column 0 the left edge; the
camera looks along +x of the camera-aligned frame, so pixel columns run toward
-y.  Depth is the z-depth along the optical axis in meters.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from math import inf, sqrt
from pathlib import Path

import cv2
import numpy as np
from numba import njit

from rearrange.egoview import CameraModel, camera_to_world
from rearrange.worldmodel import ACTIVE, ANCHOR, DISC, OBSTACLE, Footprint, World, pack_footprints

FLOOR, WALL = 1, 2
FLOOR_RGB = (90, 90, 90)
WALL_RGB = (150, 150, 150)
WALL_HEIGHT = 2.0

DEPTH_MAGIC = b"EGDP"
DEPTH_VERSION = 1


@dataclass(frozen=True)
class HsvRange:
    h_low: int
    h_high: int
    s_low: int
    s_high: int
    v_low: int
    v_high: int

    def __post_init__(self):
        if not (0 <= self.h_low <= 179 and 0 <= self.h_high <= 179):
            raise ValueError("hue bounds must lie in [0, 179]")
        for lo, hi in ((self.s_low, self.s_high), (self.v_low, self.v_high)):
            if not (0 <= lo <= hi <= 255):
                raise ValueError("S/V bounds must satisfy 0 <= low <= high <= 255")

    @property
    def wraps(self) -> bool:
        return self.h_low > self.h_high

    def contains(self, h, s, v):
        h, s, v = np.asarray(h), np.asarray(s), np.asarray(v)
        if self.wraps:
            hue = (h >= self.h_low) | (h <= self.h_high)
        else:
            hue = (h >= self.h_low) & (h <= self.h_high)
        return hue & (s >= self.s_low) & (s <= self.s_high) & (v >= self.v_low) & (v <= self.v_high)

    def midpoint(self) -> tuple[int, int, int]:
        if self.wraps:
            span = (180 - self.h_low) + self.h_high
            h = (self.h_low + span // 2) % 180
        else:
            h = (self.h_low + self.h_high) // 2
        return h, (self.s_low + self.s_high) // 2, (self.v_low + self.v_high) // 2


# OpenCV convention (H in [0,179]); red wraps through 0; violet's upper hue 180 is stored as 179
HSV_TABLE = {
    "red": HsvRange(179, 7, 100, 255, 100, 255),
    "green": HsvRange(65, 85, 50, 255, 55, 190),
    "blue": HsvRange(97, 110, 80, 255, 80, 255),
    "violet": HsvRange(150, 179, 55, 155, 45, 220),
    "brown": HsvRange(11, 22, 85, 237, 65, 220),
}
COLOR_ORDER = ("red", "green", "blue", "violet", "brown")


def hsv_to_rgb(hsv) -> tuple[int, int, int]:
    px = np.array([[hsv]], np.uint8)
    return tuple(int(x) for x in cv2.cvtColor(px, cv2.COLOR_HSV2RGB)[0, 0])


def rgb_to_hsv(rgb) -> np.ndarray:
    return cv2.cvtColor(np.ascontiguousarray(rgb, np.uint8), cv2.COLOR_RGB2HSV)


def _object_color(name: str, table) -> tuple[int, int, int]:
    """Range midpoint, nudged if the RGB round trip drifts out of the range."""
    rng = table[name]
    h, s, v = rng.midpoint()
    rgb = hsv_to_rgb((h, s, v))
    back = rgb_to_hsv(np.array([[rgb]], np.uint8))[0, 0]
    if not rng.contains(*back):
        raise ValueError(f"color midpoint for {name} does not survive RGB round trip")
    return rgb


OBJECT_RGB = {name: _object_color(name, HSV_TABLE) for name in COLOR_ORDER}


def object_colors(n_objects: int) -> list[str]:
    if n_objects > len(COLOR_ORDER):
        raise ValueError(f"at most {len(COLOR_ORDER)} distinctly colored objects")
    return list(COLOR_ORDER[:n_objects])


@dataclass
class SynthFrame:
    rgb: np.ndarray  # (H,W,3) uint8
    depth: np.ndarray  # (H,W) float32
    instance_ids: np.ndarray  # (H,W) int32, object id + 1, 0 = background
    surface: np.ndarray  # (H,W) uint8: 0 none, 1 floor, 2 wall, 3 object


@njit(cache=True)
def _ray_poly_prism(ox, oy, oz, dx, dy, dz, wv, n, h):
    t0, t1 = 0.0, inf
    # z slab
    if dz == 0.0:
        if oz < 0.0 or oz > h:
            return inf
    else:
        a = (0.0 - oz) / dz
        b = (h - oz) / dz
        if a > b:
            a, b = b, a
        t0 = max(t0, a)
        t1 = min(t1, b)
    for i in range(n):
        j = (i + 1) % n
        ex = wv[j, 0] - wv[i, 0]
        ey = wv[j, 1] - wv[i, 1]
        nx, ny = ey, -ex  # outward for CCW polygons
        num = nx * (wv[i, 0] - ox) + ny * (wv[i, 1] - oy)
        den = nx * dx + ny * dy
        if den == 0.0:
            if num < 0.0:
                return inf
        elif den > 0.0:
            t1 = min(t1, num / den)
        else:
            t0 = max(t0, num / den)
        if t0 > t1:
            return inf
    return t0 if t0 <= t1 else inf


@njit(cache=True)
def _ray_cylinder(ox, oy, oz, dx, dy, dz, cx, cy, r, h):
    t0, t1 = 0.0, inf
    if dz == 0.0:
        if oz < 0.0 or oz > h:
            return inf
    else:
        a = (0.0 - oz) / dz
        b = (h - oz) / dz
        if a > b:
            a, b = b, a
        t0 = max(t0, a)
        t1 = min(t1, b)
    px, py = ox - cx, oy - cy
    A = dx * dx + dy * dy
    C = px * px + py * py - r * r
    if A == 0.0:
        if C > 0.0:
            return inf
    else:
        B = 2.0 * (px * dx + py * dy)
        disc = B * B - 4.0 * A * C
        if disc < 0.0:
            return inf
        sq = sqrt(disc)
        t0 = max(t0, (-B - sq) / (2.0 * A))
        t1 = min(t1, (-B + sq) / (2.0 * A))
    return t0 if t0 <= t1 else inf


@njit(cache=True)
def cast_ray(o, d, kind, nv, wverts, rad, height, centers, arena_r, wall_h):
    """Nearest hit (t, object index or -1, surface code) for a world-frame ray."""
    best = inf
    hit = -1
    surf = 0
    if d[2] < 0.0:
        t = -o[2] / d[2]
        if t < best:
            best, surf = t, FLOOR
    a = d[0] * d[0] + d[1] * d[1]
    if a > 0.0:
        b = 2.0 * (o[0] * d[0] + o[1] * d[1])
        c = o[0] * o[0] + o[1] * o[1] - arena_r * arena_r
        disc = b * b - 4.0 * a * c
        if disc >= 0.0:
            t = (-b + sqrt(disc)) / (2.0 * a)
            z = o[2] + t * d[2]
            if t > 0.0 and 0.0 <= z <= wall_h and t < best:
                best, surf = t, WALL
    for i in range(kind.shape[0]):
        if kind[i] == DISC:
            t = _ray_cylinder(o[0], o[1], o[2], d[0], d[1], d[2], centers[i, 0], centers[i, 1], rad[i], height[i])
        else:
            t = _ray_poly_prism(o[0], o[1], o[2], d[0], d[1], d[2], wverts[i], nv[i], height[i])
        if t < best:
            best, hit, surf = t, i, 3
    return best, hit, surf


@njit(cache=True)
def _render(origin, rot, W, H, tan_h, tan_v, kind, nv, wverts, rad, height, centers, arena_r, wall_h,
            depth, ids, surface):
    dcam = np.empty(3)
    d = np.empty(3)
    for r in range(H):
        v = 2.0 * (r + 0.5) / H - 1.0
        for c in range(W):
            u = 2.0 * (c + 0.5) / W - 1.0
            dcam[0] = 1.0
            dcam[1] = -u * tan_h
            dcam[2] = -v * tan_v
            for k in range(3):
                d[k] = rot[k, 0] * dcam[0] + rot[k, 1] * dcam[1] + rot[k, 2] * dcam[2]
            t, hit, s = cast_ray(origin, d, kind, nv, wverts, rad, height, centers, arena_r, wall_h)
            if s != 0:
                depth[r, c] = t  # direction has unit optical-axis component, so t is z-depth
                ids[r, c] = hit + 1
                surface[r, c] = s


class SceneGeometry:
    """World-frame object volumes packed for the ray caster."""

    def __init__(self, shapes, obj_pose):
        fps = [Footprint.of_shape(s) for s in shapes]
        self.kind, self.nv, verts, self.rad = pack_footprints(fps)
        self.height = np.array([s.height for s in shapes], np.float64)
        obj_pose = np.asarray(obj_pose, np.float64)
        c, s = np.cos(obj_pose[:, 2]), np.sin(obj_pose[:, 2])
        self.wverts = np.empty_like(verts)
        self.wverts[..., 0] = c[:, None] * verts[..., 0] - s[:, None] * verts[..., 1] + obj_pose[:, None, 0]
        self.wverts[..., 1] = s[:, None] * verts[..., 0] + c[:, None] * verts[..., 1] + obj_pose[:, None, 1]
        self.centers = obj_pose[:, :2].copy()


def camera_rays(robot_pose, cam: CameraModel):
    """Camera origin and camera-to-world rotation for a robot pose."""
    origin = camera_to_world(robot_pose, cam, np.zeros(3))
    basis = camera_to_world(robot_pose, cam, np.eye(3)) - origin
    return origin, basis.T.copy()


def render_ego_frame(world: World, cam: CameraModel = CameraModel(), robot_pose=None, arena_radius=None) -> SynthFrame:
    robot_pose = world.robot_pose if robot_pose is None else np.asarray(robot_pose, np.float64)
    return render_arrays(world.task.shapes, world.obj_pose, robot_pose, cam,
                         world.task.arena_radius if arena_radius is None else arena_radius)


def render_arrays(shapes, obj_pose, robot_pose, cam: CameraModel, arena_radius: float = 1.5) -> SynthFrame:
    H, W = cam.height_px, cam.width
    geo = SceneGeometry(shapes, obj_pose)
    origin, rot = camera_rays(robot_pose, cam)
    depth = np.zeros((H, W))
    ids = np.zeros((H, W), np.int32)
    surface = np.zeros((H, W), np.uint8)
    _render(origin, rot, W, H, cam.tan_h, cam.tan_v, geo.kind, geo.nv, geo.wverts, geo.rad, geo.height,
            geo.centers, float(arena_radius), WALL_HEIGHT, depth, ids, surface)
    palette = np.zeros((len(shapes) + 1, 3), np.uint8)
    for i, name in enumerate(object_colors(len(shapes))):
        palette[i + 1] = OBJECT_RGB[name]
    rgb = palette[ids]
    rgb[surface == FLOOR] = FLOOR_RGB
    rgb[surface == WALL] = WALL_RGB
    return SynthFrame(rgb, depth.astype(np.float32), ids, surface)


def first_hit(world_or_shapes, obj_pose, origin, direction, arena_radius: float = 1.5):
    """(t, object index or -1) of the first surface along a world ray."""
    shapes = world_or_shapes.task.shapes if isinstance(world_or_shapes, World) else world_or_shapes
    geo = SceneGeometry(shapes, obj_pose)
    t, hit, _ = cast_ray(np.asarray(origin, np.float64), np.asarray(direction, np.float64), geo.kind, geo.nv,
                         geo.wverts, geo.rad, geo.height, geo.centers, float(arena_radius), WALL_HEIGHT)
    return t, hit


# segmentation ------------------------------------------------------------------


@dataclass
class Instance:
    color: str
    object_id: int
    mask: np.ndarray


def color_masks(rgb, table=HSV_TABLE) -> dict[str, np.ndarray]:
    hsv = rgb_to_hsv(rgb)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    return {name: rng.contains(h, s, v) for name, rng in table.items()}


def classify_hsv(h, s, v, table=HSV_TABLE) -> str:
    for name, rng in table.items():
        if rng.contains(h, s, v):
            return name
    return "background"


def hsv_segment(rgb, table=HSV_TABLE, colors=COLOR_ORDER, connectivity: int = 8) -> list[Instance]:
    """Per-color thresholding split into connected components.

    ``colors[i]`` is the color of object ``i``; components inherit that id.
    """
    masks = color_masks(rgb, table)
    out = []
    for oid, name in enumerate(colors):
        m = masks[name].astype(np.uint8)
        n, lab = cv2.connectedComponents(m, connectivity=connectivity)
        for k in range(1, n):
            out.append(Instance(name, oid, lab == k))
    return out


def instance_id_map(instances, shape) -> np.ndarray:
    ids = np.zeros(shape, np.int32)
    for inst in instances:
        ids[inst.mask] = inst.object_id + 1
    return ids


def group_depth_layers(masks, roles, depth) -> np.ndarray:
    """Sum of masked depth per role group; returns (3, H, W) for (active, anchor, obstacle).

    ``masks`` is a list of (object_id, mask) or :class:`Instance`; ``roles`` maps object id to role.
    """
    depth = np.asarray(depth, np.float64)
    layers = np.zeros((3, *depth.shape))
    seen = np.zeros(depth.shape, bool)
    slot = {ACTIVE: 0, ANCHOR: 1, OBSTACLE: 2}
    for item in masks:
        oid, m = (item.object_id, item.mask) if isinstance(item, Instance) else item
        m = np.asarray(m, bool)
        if (seen & m).any():
            raise ValueError("instance masks overlap")
        seen |= m
        layers[slot[int(roles[oid])]] += np.where(m, depth, 0.0)
    return layers


# depth post-processing ----------------------------------------------------------


@dataclass(frozen=True)
class DepthNoise:
    scale: float = 0.005  # per meter: sigma of the multiplicative factor is scale * depth
    dropout: float = 0.02  # probability that a block is zeroed
    block: int = 3

    def __post_init__(self):
        if self.scale < 0 or not 0 <= self.dropout <= 1 or self.block < 1:
            raise ValueError("invalid depth noise model")


def inject_depth_noise(depth, seed, model: DepthNoise = DepthNoise()) -> np.ndarray:
    """depth * (1 + N(0, scale*depth)) on valid pixels, then zero whole grid blocks with prob ``dropout``."""
    depth = np.asarray(depth, np.float64)
    rng = np.random.default_rng(seed)
    valid = depth > 0
    out = depth.copy()
    if model.scale > 0:
        out = np.where(valid, depth * (1.0 + rng.standard_normal(depth.shape) * model.scale * depth), depth)
    if model.dropout > 0:
        b = model.block
        gh, gw = -(-depth.shape[0] // b), -(-depth.shape[1] // b)
        drop = rng.random((gh, gw)) < model.dropout
        drop = np.kron(drop, np.ones((b, b), bool))[: depth.shape[0], : depth.shape[1]]
        out = np.where(drop & valid, 0.0, out)
    return out


def median_fill(depth, mask) -> np.ndarray:
    """Set every masked pixel to the median of the masked nonzero depths (left at 0 if none)."""
    depth = np.asarray(depth, np.float64)
    mask = np.asarray(mask, bool)
    out = depth.copy()
    vals = depth[mask & (depth > 0)]
    out[mask] = np.median(vals) if vals.size else 0.0
    return out


def student_layers(frame: SynthFrame, roles, noise: DepthNoise | None = None, seed=0, colors=None,
                   fill: bool = True) -> np.ndarray:
    """Full student pipeline for one frame -> (3, H, W) float32 layers."""
    colors = colors or object_colors(len(roles))
    inst = hsv_segment(frame.rgb, colors=colors)
    depth = frame.depth.astype(np.float64)
    if noise is not None:
        depth = inject_depth_noise(depth, seed, noise)
    if fill:
        filled = np.zeros_like(depth)
        for it in inst:
            filled[it.mask] = median_fill(depth, it.mask)[it.mask]
        depth = filled
    return group_depth_layers(inst, roles, depth).astype(np.float32)


def batch_student_layers(env, noise: DepthNoise | None = None, seed: int = 0) -> np.ndarray:
    """(E, 3, H, W) student layers for every environment of a VecEnv."""
    cam = env.config.camera
    out = np.zeros((env.n_envs, 3, cam.height_px, cam.width), np.float32)
    for i in range(env.n_envs):
        frame = render_arrays(env.task.shapes, env.obj_pose[i], env.robot_pose[i], cam, env.task.arena_radius)
        s = np.random.SeedSequence([seed, int(env.env_ids[i]), int(env.episode[i]), int(env.stage.t_global[i])])
        out[i] = student_layers(frame, env.roles[i], noise, s)
    return out


# frame dumps --------------------------------------------------------------------


def write_depth(path, depth) -> None:
    """b"EGDP" | u16 version | u16 height | u16 width | float32 little-endian row-major data."""
    depth = np.asarray(depth, "<f4")
    h, w = depth.shape
    Path(path).write_bytes(DEPTH_MAGIC + struct.pack("<HHH", DEPTH_VERSION, h, w) + depth.tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DEPTH_MAGIC:
        raise ValueError(f"{path}: not a depth dump")
    version, h, w = struct.unpack("<HHH", raw[4:10])
    if version != DEPTH_VERSION:
        raise ValueError(f"{path}: unsupported depth dump version {version}")
    data = np.frombuffer(raw[10:], "<f4")
    if data.size != h * w:
        raise ValueError(f"{path}: truncated depth dump")
    return data.reshape(h, w).copy()


def write_frame(prefix, frame: SynthFrame) -> list[Path]:
    """Writes <prefix>_rgb.png, <prefix>_ids.png (8-bit, id+1) and <prefix>_depth.bin."""
    from PIL import Image

    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = [Path(f"{prefix}_rgb.png"), Path(f"{prefix}_ids.png"), Path(f"{prefix}_depth.bin")]
    Image.fromarray(frame.rgb, "RGB").save(paths[0])
    Image.fromarray(frame.instance_ids.astype(np.uint8), "L").save(paths[1])
    write_depth(paths[2], frame.depth)
    return paths


def pixel_of(p_cam, cam: CameraModel):
    """Fractional (row, col) of a camera-frame point under the renderer's pixel convention."""
    p = np.asarray(p_cam, np.float64)
    u_img = -p[..., 1] / (p[..., 0] * cam.tan_h)
    v_img = -p[..., 2] / (p[..., 0] * cam.tan_v)
    col = (u_img + 1.0) * cam.width / 2.0 - 0.5
    row = (v_img + 1.0) * cam.height_px / 2.0 - 0.5
    return row, col


__all__ = [
    "DepthNoise",
    "HSV_TABLE",
    "HsvRange",
    "SynthFrame",
    "group_depth_layers",
    "hsv_segment",
    "inject_depth_noise",
    "median_fill",
    "render_ego_frame",
    "read_depth",
    "write_depth",
]
