"""Scene description: shapes, formations, canonical keypoints and randomized resets."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

ACTIVE, ANCHOR, OBSTACLE = 0, 1, 2
ROLE_NAMES = {ACTIVE: "active", ANCHOR: "anchor", OBSTACLE: "obstacle"}

SHAPE_KINDS = ("cube", "cylinder", "prism")
FORMATIONS = ("pair", "cross", "line")

# reference slots keep this much room to the arena boundary so the robot can get behind them
SLOT_WALL_MARGIN = 0.4

# footprint kinds used by the collision kernels
POLYGON, DISC = 0, 1


class PlacementError(RuntimeError):
    """Rejection sampling could not place every body."""

    def __init__(self, seed: int, what: str):
        super().__init__(f"could not place {what} (seed={seed})")
        self.seed = seed


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @classmethod
    def from_array(cls, a) -> "Pose2":
        return cls(a[0], a[1], a[2])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])

    def compose(self, other: "Pose2") -> "Pose2":
        """self ∘ other: ``other`` expressed in the frame of ``self``."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(-c * self.x - s * self.y, s * self.x - c * self.y, -self.yaw)


@dataclass(frozen=True)
class ObjectShape:
    kind: str = "cube"
    size: float = 0.15  # cube edge / cylinder diameter / prism side
    height: float = 0.15

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unsupported shape kind {self.kind!r}")
        if not (self.size > 0 and self.height > 0):
            raise ValueError("shape dimensions must be positive")

    @property
    def symmetry(self) -> float:
        """Rotational symmetry period of the footprint (0 means continuous)."""
        return {"cube": math.pi / 2, "cylinder": 0.0, "prism": 2 * math.pi / 3}[self.kind]

    def footprint_vertices(self) -> np.ndarray:
        """CCW footprint polygon in the local frame (empty for discs)."""
        h = self.size / 2
        if self.kind == "cube":
            return np.array([[-h, -h], [h, -h], [h, h], [-h, h]])
        if self.kind == "prism":
            r = self.size / math.sqrt(3.0)
            ang = np.array([0.0, 2 * math.pi / 3, 4 * math.pi / 3])
            return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
        return np.zeros((0, 2))

    @property
    def bounding_radius(self) -> float:
        if self.kind == "cylinder":
            return self.size / 2
        return float(np.max(np.linalg.norm(self.footprint_vertices(), axis=1)))

    @property
    def area(self) -> float:
        if self.kind == "cube":
            return self.size**2
        if self.kind == "cylinder":
            return math.pi * (self.size / 2) ** 2
        return math.sqrt(3.0) / 4 * self.size**2


@dataclass(frozen=True)
class Footprint:
    """Planar collision geometry in a body frame."""

    kind: int
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    radius: float = 0.0

    @classmethod
    def of_shape(cls, shape: ObjectShape) -> "Footprint":
        if shape.kind == "cylinder":
            return cls(DISC, np.zeros((0, 2)), shape.size / 2)
        return cls(POLYGON, shape.footprint_vertices(), 0.0)

    @classmethod
    def rectangle(cls, x0: float, x1: float, y0: float, y1: float) -> "Footprint":
        return cls(POLYGON, np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float))


def pack_footprints(fps) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Flatten footprints into (kind, nverts, verts[B,4,2], radius) arrays for the kernels."""
    n = len(fps)
    kind = np.zeros(n, np.int64)
    nv = np.zeros(n, np.int64)
    verts = np.zeros((n, 4, 2))
    rad = np.zeros(n)
    for i, fp in enumerate(fps):
        kind[i] = fp.kind
        nv[i] = len(fp.vertices)
        verts[i, : nv[i]] = fp.vertices
        rad[i] = fp.radius
    return kind, nv, verts, rad


@dataclass(frozen=True)
class TaskSpec:
    formation: str = "pair"
    n_objects: int = 2
    spacing: float = 0.30
    arena_radius: float = 1.5
    shapes: tuple = ()
    placement_radius: float = 1.0
    clearance: float = 0.05
    max_retries: int = 1000
    keypoints: int = 8

    def __post_init__(self):
        if self.formation not in FORMATIONS:
            raise ValueError(f"unknown formation {self.formation!r}")
        if self.formation == "pair" and self.n_objects != 2:
            raise ValueError("pair formation requires n_objects = 2")
        if self.formation == "cross" and self.n_objects != 5:
            raise ValueError("cross formation requires n_objects = 5")
        if self.formation == "line" and self.n_objects < 2:
            raise ValueError("line formation requires at least 2 objects")
        if not self.shapes:
            object.__setattr__(self, "shapes", tuple(ObjectShape() for _ in range(self.n_objects)))
        if len(self.shapes) != self.n_objects:
            raise ValueError("one shape per object required")
        if self.keypoints < 4:
            raise ValueError("at least 4 keypoints per object")
        biggest = max(s.bounding_radius for s in self.shapes)
        if self.spacing <= biggest:
            raise ValueError("spacing must exceed the largest footprint radius")
        if not 0 < self.placement_radius <= self.arena_radius:
            raise ValueError("placement_radius must lie in (0, arena_radius]")

    @property
    def n_stages(self) -> int:
        return len(build_stage_script(self).stages)


@dataclass(frozen=True)
class StageScript:
    stages: tuple  # ((active_id, Pose2 rel_target), ...)
    anchor_id: int = 0

    def active_ids(self) -> np.ndarray:
        return np.array([s[0] for s in self.stages], np.int64)

    def rel_targets(self) -> np.ndarray:
        return np.array([s[1].as_array() for s in self.stages])


def build_stage_script(task: TaskSpec) -> StageScript:
    s = task.spacing
    if task.formation == "pair":
        stages = ((1, Pose2(s, 0.0, 0.0)),)
    elif task.formation == "cross":
        slots = [Pose2(s, 0, 0), Pose2(0, s, 0), Pose2(-s, 0, 0), Pose2(0, -s, 0)]
        stages = tuple((i + 1, p) for i, p in enumerate(slots))
    else:
        stages = tuple((i, Pose2(i * s, 0.0, 0.0)) for i in range(1, task.n_objects))
    return StageScript(stages, anchor_id=0)


def canonical_keypoints(shape: ObjectShape, k: int = 8) -> np.ndarray:
    """k surface points in the object frame (origin at footprint centroid, z=0 on the floor)."""
    if shape.kind not in SHAPE_KINDS:
        raise ValueError(f"unsupported shape kind {shape.kind!r}")
    if k < 4:
        raise ValueError("k must be >= 4")
    n_bot = k // 2
    n_top = k - n_bot
    if shape.kind == "cylinder":
        r = shape.size / 2
        a_bot = 2 * np.pi * np.arange(n_bot) / n_bot
        a_top = 2 * np.pi * np.arange(n_top) / n_top + np.pi / n_top
        bot = np.stack([r * np.cos(a_bot), r * np.sin(a_bot), np.zeros(n_bot)], 1)
        top = np.stack([r * np.cos(a_top), r * np.sin(a_top), np.full(n_top, shape.height)], 1)
        return np.concatenate([bot, top])
    poly = shape.footprint_vertices()
    if n_bot == n_top == len(poly):
        bot2, top2 = poly, poly
    else:
        bot2, top2 = _perimeter_points(poly, n_bot), _perimeter_points(poly, n_top)
    bot = np.column_stack([bot2, np.zeros(len(bot2))])
    top = np.column_stack([top2, np.full(len(top2), shape.height)])
    return np.concatenate([bot, top])


def _perimeter_points(poly: np.ndarray, n: int) -> np.ndarray:
    edges = np.roll(poly, -1, axis=0) - poly
    lengths = np.linalg.norm(edges, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    s = cum[-1] * np.arange(n) / n
    idx = np.searchsorted(cum, s, side="right") - 1
    t = (s - cum[idx]) / lengths[idx]
    return poly[idx] + t[:, None] * edges[idx]


def transform_points(pose, points: np.ndarray) -> np.ndarray:
    """Apply planar pose(s) ``(..., 3)`` to 3-D local points ``(..., k, 3)``."""
    pose = np.asarray(pose, dtype=np.float64)
    c = np.cos(pose[..., 2])[..., None]
    s = np.sin(pose[..., 2])[..., None]
    px, py, pz = points[..., 0], points[..., 1], points[..., 2]
    wx = c * px - s * py + pose[..., 0, None]
    wy = s * px + c * py + pose[..., 1, None]
    return np.stack([wx, wy, np.broadcast_to(pz, wx.shape)], axis=-1)


def compose_poses(a, b) -> np.ndarray:
    """Vectorized a ∘ b for pose arrays ``(..., 3)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    return np.stack(
        [
            a[..., 0] + c * b[..., 0] - s * b[..., 1],
            a[..., 1] + s * b[..., 0] + c * b[..., 1],
            wrap_angle(a[..., 2] + b[..., 2]),
        ],
        axis=-1,
    )


def instantiate_reference(anchor_pose: Pose2, rel_target: Pose2, shape: ObjectShape, k: int = 8) -> np.ndarray:
    target = anchor_pose.compose(rel_target)
    return transform_points(target.as_array(), canonical_keypoints(shape, k))


@dataclass(frozen=True)
class SceneObject:
    id: int
    role: str
    shape: ObjectShape
    pose: Pose2
    lin_vel: tuple
    ang_vel: float


@dataclass
class World:
    """Single-environment state.  Arrays are owned by this instance."""

    task: TaskSpec
    script: StageScript
    robot_pose: np.ndarray
    robot_vel: np.ndarray
    wheels: np.ndarray
    obj_pose: np.ndarray
    obj_vel: np.ndarray
    roles: np.ndarray

    @property
    def objects(self) -> list[SceneObject]:
        return [
            SceneObject(
                i,
                ROLE_NAMES[int(self.roles[i])],
                self.task.shapes[i],
                Pose2.from_array(self.obj_pose[i]),
                (float(self.obj_vel[i, 0]), float(self.obj_vel[i, 1])),
                float(self.obj_vel[i, 2]),
            )
            for i in range(self.task.n_objects)
        ]

    @property
    def active_id(self) -> int:
        return int(np.flatnonzero(self.roles == ACTIVE)[0])

    def copy(self) -> "World":
        return replace(
            self,
            robot_pose=self.robot_pose.copy(),
            robot_vel=self.robot_vel.copy(),
            wheels=self.wheels.copy(),
            obj_pose=self.obj_pose.copy(),
            obj_vel=self.obj_vel.copy(),
            roles=self.roles.copy(),
        )

    def fingerprint(self) -> bytes:
        return b"".join(
            a.tobytes() for a in (self.robot_pose, self.robot_vel, self.wheels, self.obj_pose, self.obj_vel, self.roles)
        )


def initial_roles(task: TaskSpec, script: StageScript | None = None) -> np.ndarray:
    script = script or build_stage_script(task)
    roles = np.full(task.n_objects, OBSTACLE, np.int64)
    roles[script.anchor_id] = ANCHOR
    roles[script.stages[0][0]] = ACTIVE
    return roles


def make_world(task: TaskSpec, robot_pose, obj_pose, roles=None) -> World:
    script = build_stage_script(task)
    return World(
        task=task,
        script=script,
        robot_pose=np.asarray(robot_pose, dtype=np.float64).copy(),
        robot_vel=np.zeros(3),
        wheels=np.zeros(2),
        obj_pose=np.asarray(obj_pose, dtype=np.float64).reshape(task.n_objects, 3).copy(),
        obj_vel=np.zeros((task.n_objects, 3)),
        roles=initial_roles(task, script) if roles is None else np.asarray(roles, np.int64).copy(),
    )


def sample_initial_scene(task: TaskSpec, seed, robot_footprint: Footprint | None = None, rng=None) -> World:
    """Rejection-sample a non-overlapping scene; deterministic given ``seed``."""
    from rearrange.physics import ROBOT_FOOTPRINT, footprints_overlap

    robot_fp = robot_footprint or ROBOT_FOOTPRINT
    rng = rng if rng is not None else np.random.default_rng(seed)
    script = build_stage_script(task)
    fps = [Footprint.of_shape(s) for s in task.shapes]

    placed: list[tuple[Footprint, np.ndarray]] = []

    def free(fp, pose) -> bool:
        return not any(footprints_overlap(fp, pose, f2, p2, task.clearance) for f2, p2 in placed)

    def inside(fp, pose, radius) -> bool:
        return _max_extent(fp, pose) <= radius

    # anchor first; its reference slots are kept clear so every stage is feasible
    anchor = None
    for _ in range(task.max_retries):
        pose = _uniform_pose(rng, task.placement_radius)
        slots_ok = all(
            inside(fps[aid], compose_poses(pose, rel.as_array()), task.arena_radius - SLOT_WALL_MARGIN)
            for aid, rel in script.stages
        )
        if inside(fps[0], pose, task.placement_radius) and slots_ok:
            anchor = pose
            break
    if anchor is None:
        raise PlacementError(seed, "anchor")
    obj_pose = np.zeros((task.n_objects, 3))
    obj_pose[script.anchor_id] = anchor
    placed.append((fps[script.anchor_id], anchor))
    for aid, rel in script.stages:
        placed.append((fps[aid], compose_poses(anchor, rel.as_array())))

    for i in range(task.n_objects):
        if i == script.anchor_id:
            continue
        for _ in range(task.max_retries):
            pose = _uniform_pose(rng, task.placement_radius)
            if inside(fps[i], pose, task.placement_radius) and free(fps[i], pose):
                break
        else:
            raise PlacementError(seed, f"object {i}")
        obj_pose[i] = pose
        placed.append((fps[i], pose))

    for _ in range(task.max_retries):
        pose = _uniform_pose(rng, task.placement_radius)
        if inside(robot_fp, pose, task.placement_radius) and free(robot_fp, pose):
            break
    else:
        raise PlacementError(seed, "robot")
    return make_world(task, pose, obj_pose)


def _uniform_pose(rng, radius: float) -> np.ndarray:
    r = radius * math.sqrt(rng.random())
    t = 2 * math.pi * rng.random()
    yaw = wrap_angle(2 * math.pi * rng.random() - math.pi)
    return np.array([r * math.cos(t), r * math.sin(t), yaw])


def _max_extent(fp: Footprint, pose) -> float:
    pose = np.asarray(pose)
    if fp.kind == DISC:
        return float(math.hypot(pose[0], pose[1]) + fp.radius)
    pts = transform_points(pose, np.column_stack([fp.vertices, np.zeros(len(fp.vertices))]))
    return float(np.max(np.hypot(pts[:, 0], pts[:, 1])))
