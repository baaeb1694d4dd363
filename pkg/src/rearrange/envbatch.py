"""Vectorized episodes: reset/step over many independent worlds with auto-reset.

Episode ``k`` of environment ``i`` under base seed ``s`` is generated from
``SeedSequence([s, i, k])`` and nothing else, so batches of any size or worker
count produce the same per-environment streams.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from rearrange.egoview import CameraModel, GroupedObservation, KeypointTable, assemble_batch
from rearrange.physics import PUSHER_TIP, BatchStepper, PhysicsParams, SimClock
from rearrange.rewardkit import (
    Outcome,
    RewardComponents,
    RewardWeights,
    StageState,
    Thresholds,
    check_termination,
    collision_flags,
    default_stage_budget,
    place_condition,
    progress_reward,
    reach_condition,
    slowdown_reward,
    smoothness_penalty,
    stage_geometry,
    time_factor,
    total_reward,
    update_stage,
)
from rearrange.worldmodel import ACTIVE, TaskSpec, World, build_stage_script, initial_roles, sample_initial_scene

CURRICULA = ("full", "reach")


@dataclass
class EnvConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    camera: CameraModel = field(default_factory=CameraModel)
    physics: PhysicsParams = field(default_factory=PhysicsParams)
    clock: SimClock = field(default_factory=SimClock)
    weights: RewardWeights = field(default_factory=RewardWeights)
    thresholds: Thresholds = field(default_factory=Thresholds)
    preset: str = "ours"
    curriculum: str = "full"
    stage_budget: int | None = None  # None: episode_limit // n_stages
    n_envs: int = 1
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.n_envs < 1:
            raise ValueError("n_envs must be >= 1")
        if self.curriculum not in CURRICULA:
            raise ValueError(f"unknown curriculum {self.curriculum!r}")
        from rearrange.rewardkit import PRESETS

        if self.preset not in PRESETS:
            raise ValueError(f"unknown reward preset {self.preset!r}")
        if self.stage_budget is not None and self.stage_budget < 1:
            raise ValueError("stage_budget must be >= 1")

    @property
    def T_s(self) -> int:
        if self.stage_budget is not None:
            return int(self.stage_budget)
        return default_stage_budget(self.clock.episode_limit, self.task.n_stages)


@dataclass
class BatchObservation:
    act: np.ndarray  # (E,k,3)
    anc: np.ndarray
    obs: np.ndarray  # (E,n_obs_max*k,3)
    ref: np.ndarray
    prev_action: np.ndarray  # (E,2)

    def __len__(self) -> int:
        return len(self.act)

    def __getitem__(self, i) -> GroupedObservation:
        return GroupedObservation(self.act[i], self.anc[i], self.obs[i], self.ref[i], self.prev_action[i])

    def packed(self, mask_value=-10.0) -> tuple[np.ndarray, np.ndarray]:
        """Groups stacked as (E, 4, P, 3) in order act, anc, obs, ref, plus group lengths."""
        groups = (self.act, self.anc, self.obs, self.ref)
        p = max(g.shape[1] for g in groups)
        out = np.full((len(self), 4, p, 3), mask_value, np.float64)
        for j, g in enumerate(groups):
            out[:, j, : g.shape[1]] = g
        return out, np.array([g.shape[1] for g in groups])

    def flat(self) -> np.ndarray:
        n = len(self)
        return np.concatenate(
            [self.act.reshape(n, -1), self.anc.reshape(n, -1), self.obs.reshape(n, -1), self.ref.reshape(n, -1),
             self.prev_action], axis=1,
        )

    def copy(self) -> "BatchObservation":
        return BatchObservation(*(a.copy() for a in (self.act, self.anc, self.obs, self.ref, self.prev_action)))


@dataclass
class StepBatch:
    observations: BatchObservation
    rewards: np.ndarray
    dones: np.ndarray
    outcomes: np.ndarray
    info: dict

    def __eq__(self, other) -> bool:  # bitwise comparison for determinism checks
        return isinstance(other, StepBatch) and self.digest() == other.digest()

    def digest(self) -> bytes:
        o = self.observations
        parts = [o.act, o.anc, o.obs, o.ref, o.prev_action, self.rewards, self.dones, self.outcomes]
        parts += [np.asarray(self.info[k]) for k in ("stage_idx", "tau", "g", "d_rbt", "d_ref", "episode")]
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


def episode_seed(seed: int, env_idx: int, episode: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(env_idx), int(episode)])


def episode_world(task: TaskSpec, seed: int, env_idx: int, episode: int) -> World:
    ss = episode_seed(seed, env_idx, episode)
    return sample_initial_scene(task, (seed, env_idx, episode), rng=np.random.default_rng(ss))


class VecEnv:
    """Synchronous batch of pushing environments.

    ``env_ids`` chooses which global environment indices this batch hosts; the
    default hosts ``0..n_envs-1``.  Hosting a single index reproduces that
    environment's stream exactly.
    """

    def __init__(self, config: EnvConfig, env_ids=None):
        self.config = config
        self.task = config.task
        self.script = build_stage_script(config.task)
        self.active_ids = self.script.active_ids()
        self.rel_targets = self.script.rel_targets()
        self.anchor_id = self.script.anchor_id
        self.env_ids = np.arange(config.n_envs) if env_ids is None else np.asarray(env_ids, np.int64)
        self.n_envs = len(self.env_ids)
        self.n_obj = config.task.n_objects
        self.T_s = config.T_s
        self.stepper = BatchStepper(config.task.shapes, config.physics, config.clock, config.workers)
        self.table = KeypointTable(config.task.shapes, config.task.keypoints)
        self.symmetry = np.array([s.symmetry for s in config.task.shapes])
        self._recorders: dict[int, list] = {}
        self.seed = None

    # state -------------------------------------------------------------

    def _alloc(self):
        e, n = self.n_envs, self.n_obj
        self.robot_pose = np.zeros((e, 3))
        self.robot_vel = np.zeros((e, 3))
        self.wheels = np.zeros((e, 2))
        self.obj_pose = np.zeros((e, n, 3))
        self.obj_vel = np.zeros((e, n, 3))
        self.roles = np.tile(initial_roles(self.task, self.script), (e, 1))
        self.prev_action = np.zeros((e, 2))
        self.episode = np.zeros(e, np.int64)
        self.path_len = np.zeros(e)
        self.reached = np.zeros(e, bool)
        self.placed = np.zeros((e, len(self.active_ids)), bool)
        self.release = np.zeros((e, n), bool)  # placed boxes the pusher has not yet let go of
        self.stage = StageState.initial(e, self.T_s)

    def _reset_rows(self, rows):
        for r in rows:
            w = episode_world(self.task, self.seed, self.env_ids[r], self.episode[r])
            self.robot_pose[r] = w.robot_pose
            self.robot_vel[r] = 0.0
            self.wheels[r] = 0.0
            self.obj_pose[r] = w.obj_pose
            self.obj_vel[r] = 0.0
            self.roles[r] = w.roles
        rows = np.asarray(rows, np.int64)
        st = self.stage
        for a in (st.stage_idx, st.tau, st.g, st.t_global):
            a[rows] = 0
        st.reach_latched[rows] = False
        st.place_latched[rows] = False
        self.prev_action[rows] = 0.0
        self.path_len[rows] = 0.0
        self.reached[rows] = False
        self.placed[rows] = False
        self.release[rows] = False
        geom = self.geometry()
        st.prev_d_rbt[rows] = geom.d_rbt[rows]
        st.prev_d_ref[rows] = geom.d_ref[rows]

    def geometry(self):
        active = self.active_ids[self.stage.stage_idx]
        rel = self.rel_targets[self.stage.stage_idx]
        return stage_geometry(
            self.robot_pose, self.obj_pose, self.obj_vel, active, np.full(self.n_envs, self.anchor_id), rel,
            self.symmetry, PUSHER_TIP,
        )

    def world(self, i: int) -> World:
        return World(
            self.task, self.script, self.robot_pose[i].copy(), self.robot_vel[i].copy(), self.wheels[i].copy(),
            self.obj_pose[i].copy(), self.obj_vel[i].copy(), self.roles[i].copy(),
        )

    def observe(self) -> BatchObservation:
        idx = self.stage.stage_idx
        act, anc, obs, ref, prev, _ = assemble_batch(
            self.robot_pose, self.obj_pose, self.roles, self.active_ids[idx], np.full(self.n_envs, self.anchor_id),
            self.rel_targets[idx], self.prev_action, self.config.camera, self.table,
        )
        return BatchObservation(act, anc, obs, ref, prev)

    def _info(self, geom) -> dict:
        st = self.stage
        return {
            "stage_idx": st.stage_idx.copy(),
            "tau": st.tau.copy(),
            "g": st.g.copy(),
            "t": st.t_global.copy(),
            "d_rbt": geom.d_rbt,
            "d_ref": geom.d_ref,
            "episode": self.episode.copy(),
        }

    # interface ----------------------------------------------------------

    def reset(self, seed: int | None = None, start_episode=None) -> StepBatch:
        self.seed = self.config.seed if seed is None else int(seed)
        self._alloc()
        if start_episode is not None:
            self.episode[:] = np.broadcast_to(np.asarray(start_episode, np.int64), self.n_envs)
        self._reset_rows(range(self.n_envs))
        geom = self.geometry()
        e = self.n_envs
        info = self._info(geom)
        info["summaries"] = {}
        return StepBatch(self.observe(), np.zeros(e), np.zeros(e, bool), np.zeros(e, np.int64), info)

    def step(self, actions) -> StepBatch:
        if self.seed is None:
            raise RuntimeError("call reset() before step()")
        actions = np.asarray(actions, np.float64)
        if actions.shape != (self.n_envs, 2):
            raise ValueError(f"actions must have shape ({self.n_envs}, 2), got {actions.shape}")
        if not np.isfinite(actions).all():
            raise ValueError("actions contain NaN or inf")
        actions = np.clip(actions, -1.0, 1.0)
        cfg = self.config
        thr, w = cfg.thresholds, cfg.weights
        st = self.stage
        before_xy = self.robot_pose[:, :2].copy()

        flags = self.stepper.step(
            self.robot_pose, self.robot_vel, self.wheels, self.obj_pose, self.obj_vel,
            self.stepper.targets_from_actions(actions),
        )
        self.path_len += np.hypot(*(self.robot_pose[:, :2] - before_xy).T)
        robot_touch = flags[:, 0, 1:]
        self.release &= robot_touch
        collision = collision_flags(flags, self.roles, self.release)

        geom = self.geometry()
        reach_ev = reach_condition(geom, thr) & (st.g == 0) & ~st.reach_latched
        place_ev = place_condition(geom, thr) & (st.g == 1) & ~st.place_latched
        eta_stage = time_factor(st.tau, self.T_s, w.eps0)
        eta_global = time_factor(np.minimum(st.t_global, self.T_s), self.T_s, w.eps0)
        slow = slowdown_reward(geom, thr) * (st.g == 1)
        smooth = smoothness_penalty(actions, self.prev_action, thr.smooth)
        progress = progress_reward(geom, st, w)

        new, roles, ev = update_stage(
            st, geom, thr, self.active_ids, self.roles, self.anchor_id, cfg.curriculum
        )
        comps = RewardComponents(reach_ev, place_ev, ev.success, eta_stage, eta_global, progress, smooth, slow)
        rewards = total_reward(comps, w, cfg.preset, cfg.curriculum)

        self.reached |= reach_ev
        rows = np.arange(self.n_envs)
        placed_stage = st.stage_idx
        self.placed[rows[ev.place], placed_stage[ev.place]] = True
        done_ids = self.active_ids[placed_stage[ev.place]]
        self.release[rows[ev.place], done_ids] = robot_touch[rows[ev.place], done_ids]

        self.roles = roles
        self.stage = new
        geom_new = self.geometry()
        new.prev_d_rbt = geom_new.d_rbt.copy()
        new.prev_d_ref = geom_new.d_ref.copy()
        self.prev_action = actions.copy()

        outcomes = check_termination(
            ev.success, self.robot_pose, self.task.arena_radius, collision, new.tau, self.T_s, new.t_global,
            cfg.clock.episode_limit,
        )
        dones = outcomes != Outcome.RUNNING
        info = self._info(geom)
        info["components"] = comps
        info["collision"] = collision
        summaries = {}
        for i in np.flatnonzero(dones):
            summaries[int(i)] = self._summary(i, outcomes[i], geom.d_ref[i])
        info["summaries"] = summaries
        if self._recorders:
            self._emit(actions, rewards, comps, outcomes, summaries)

        if dones.any():
            self.episode[dones] += 1
            self._reset_rows(np.flatnonzero(dones))
        return StepBatch(self.observe(), rewards, dones, outcomes, info)

    def _summary(self, i, outcome, d_final) -> dict:
        return {
            "env": int(self.env_ids[i]),
            "episode": int(self.episode[i]),
            "seed": int(self.seed),
            "outcome": Outcome(int(outcome)).label,
            "steps": int(self.stage.t_global[i]),
            "path_len": float(self.path_len[i]),
            "reached": bool(self.reached[i]),
            "placed": [bool(x) for x in self.placed[i]],
            "final_d": float(d_final),
        }

    # logging --------------------------------------------------------------

    def record_trajectory(self, env_idx: int, sink) -> "TrajectoryRecorder":
        """Stream one JSON record per policy step of local env ``env_idx`` into ``sink``."""
        rec = TrajectoryRecorder(self, env_idx, sink)
        self._recorders.setdefault(env_idx, []).append(rec)
        return rec

    def _emit(self, actions, rewards, comps, outcomes, summaries):
        for i, recs in self._recorders.items():
            rec = {
                "type": "step",
                "env": int(self.env_ids[i]),
                "episode": int(self.episode[i]),
                "seed": int(self.seed),
                "t": int(self.stage.t_global[i]),
                "robot": self.robot_pose[i].tolist(),
                "objects": self.obj_pose[i].tolist(),
                "roles": self.roles[i].tolist(),
                "action": actions[i].tolist(),
                "reward": float(rewards[i]),
                "components": comps.as_dict(i),
                "stage": {"idx": int(self.stage.stage_idx[i]), "tau": int(self.stage.tau[i]),
                          "g": int(self.stage.g[i])},
                "outcome": Outcome(int(outcomes[i])).label,
            }
            for r in recs:
                r.finished = False
                r.write(rec)
                if i in summaries:
                    r.write({"type": "terminal", **summaries[i]})
                    r.finished = True

    def close(self):
        for recs in list(self._recorders.values()):
            for r in list(recs):
                r.close()
        self._recorders.clear()
        self.stepper.close()


class TrajectoryRecorder:
    """Writes JSON lines; closing an unfinished episode appends a terminal record with outcome Running."""

    def __init__(self, env: VecEnv, env_idx: int, sink):
        self.env = env
        self.env_idx = env_idx
        self.sink = sink
        self.finished = False
        self.count = 0

    def write(self, record: dict):
        if hasattr(self.sink, "write"):
            self.sink.write(json.dumps(record) + "\n")
        else:
            self.sink(record)
        self.count += 1

    def close(self):
        if self.finished:
            return
        e, i = self.env, self.env_idx
        geom = e.geometry()
        s = e._summary(i, Outcome.RUNNING, geom.d_ref[i])
        self.write({"type": "terminal", **s})
        self.finished = True
        lst = e._recorders.get(i, [])
        if self in lst:
            lst.remove(self)
            if not lst:
                e._recorders.pop(i, None)


def read_log(lines) -> list[dict]:
    return [json.loads(ln) for ln in lines if ln.strip()]


def replay_actions(config: EnvConfig, records: list[dict]) -> list[dict]:
    """Re-run the logged actions of one episode through a fresh single env; returns its step records."""
    steps = [r for r in records if r["type"] == "step"]
    if not steps:
        return []
    first = steps[0]
    cfg = EnvConfig(**{**config.__dict__, "n_envs": 1, "workers": 1})
    env = VecEnv(cfg, env_ids=[first["env"]])
    env.reset(first["seed"], start_episode=first["episode"])
    out: list[dict] = []
    env.record_trajectory(0, out.append)
    for r in steps:
        env.step(np.asarray(r["action"], np.float64)[None])
    env.close()
    return [r for r in out if r["type"] == "step"]


def rollout(env: VecEnv, policy, n_episodes: int, seed: int | None = None, max_steps: int | None = None):
    """Run ``policy(env, batch) -> actions`` until ``n_episodes`` episodes finish; summaries ordered by (env, episode)."""
    batch = env.reset(seed)
    done: list[dict] = []
    quota = np.zeros(env.n_envs, np.int64)
    per_env = -(-n_episodes // env.n_envs)
    steps = 0
    while (quota < per_env).any():
        batch = env.step(policy(env, batch))
        for i, s in batch.info["summaries"].items():
            if quota[i] < per_env:
                done.append(s)
                quota[i] += 1
        steps += 1
        if max_steps is not None and steps >= max_steps:
            break
    done.sort(key=lambda s: (s["env"], s["episode"]))
    return done[:n_episodes]


__all__ = [
    "ACTIVE",
    "BatchObservation",
    "EnvConfig",
    "StepBatch",
    "TrajectoryRecorder",
    "VecEnv",
    "episode_world",
    "read_log",
    "replay_actions",
    "rollout",
]
