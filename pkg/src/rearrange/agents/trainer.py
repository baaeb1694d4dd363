"""Teacher PPO loop over a VecEnv."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from rearrange.agents.networks import ActorCritic
from rearrange.agents.ppo import PPOHyper, RolloutBuffer, ppo_update
from rearrange.envbatch import EnvConfig, VecEnv


@dataclass
class TrainLog:
    episodes: list = field(default_factory=list)  # dicts: step, ret, reached, outcome
    updates: list = field(default_factory=list)

    def returns(self) -> np.ndarray:
        return np.array([e["ret"] for e in self.episodes])

    def smoothed(self, window: int = 50) -> np.ndarray:
        r = self.returns()
        if len(r) < window:
            return np.array([r.mean()]) if len(r) else np.zeros(0)
        c = np.cumsum(np.insert(r, 0, 0.0))
        return (c[window:] - c[:-window]) / window

    def reach_rate(self, last: int = 200) -> float:
        eps = self.episodes[-last:]
        return float(np.mean([e["reached"] for e in eps])) if eps else 0.0


def obs_tensors(batch, dtype=torch.float32) -> dict:
    groups, _ = batch.observations.packed()
    return {
        "groups": torch.as_tensor(groups, dtype=dtype),
        "prev_action": torch.as_tensor(batch.observations.prev_action, dtype=dtype),
    }


def make_teacher(cfg: EnvConfig, seed: int = 0, **kw) -> ActorCritic:
    torch.manual_seed(seed)
    k = cfg.task.keypoints
    return ActorCritic(group_lengths=(k, k, cfg.camera.n_obs_max * k, k), **kw)


def train_teacher(cfg: EnvConfig, total_steps: int, seed: int = 0, hyper: PPOHyper = PPOHyper(),
                  model: ActorCritic | None = None, callback=None, drop_masked: bool = True):
    """Train with PPO for ``total_steps`` environment steps; returns (model, TrainLog)."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    env = VecEnv(cfg)
    model = model or make_teacher(cfg, seed, drop_masked=drop_masked)
    opt = torch.optim.Adam(model.parameters(), lr=hyper.lr, eps=1e-5)
    batch = env.reset(seed)
    obs = obs_tensors(batch)
    spec = {k: tuple(v.shape[1:]) for k, v in obs.items()}
    buf = RolloutBuffer(hyper.horizon, env.n_envs, spec)
    log = TrainLog()
    ep_ret = np.zeros(env.n_envs)
    steps = 0
    t0 = time.time()
    while steps < total_steps:
        buf.clear()
        for _ in range(hyper.horizon):
            with torch.no_grad():
                dist, value = model.distribution(obs["groups"], obs["prev_action"])
                action = _sample(dist, gen)
                logp = dist.log_prob(action).sum(-1)
            a = action.numpy().astype(np.float64)
            batch = env.step(a)
            ep_ret += batch.rewards
            buf.add({k: v.numpy() for k, v in obs.items()}, a, logp.numpy(), value.numpy(), batch.rewards,
                    batch.dones)
            for i, s in batch.info["summaries"].items():
                log.episodes.append({"step": steps, "ret": float(ep_ret[i]), "reached": s["reached"],
                                     "outcome": s["outcome"]})
                ep_ret[i] = 0.0
            obs = obs_tensors(batch)
            steps += env.n_envs
        with torch.no_grad():
            _, last_v = model.distribution(obs["groups"], obs["prev_action"])
        data = buf.finish(last_v.numpy(), hyper.gamma, hyper.lam)
        stats = ppo_update(model, opt, data, hyper, gen)
        row = {"step": steps, "episodes": len(log.episodes), "reach_rate": log.reach_rate(),
               "mean_return": float(np.mean(log.returns()[-100:])) if log.episodes else 0.0,
               "wall": time.time() - t0, **stats}
        log.updates.append(row)
        if callback is not None:
            callback(row)
    env.close()
    return model, log


def _sample(dist: torch.distributions.Normal, gen: torch.Generator) -> torch.Tensor:
    eps = torch.randn(dist.mean.shape, generator=gen, dtype=dist.mean.dtype)
    return dist.mean + dist.stddev * eps


def random_baseline(cfg: EnvConfig, total_steps: int, seed: int = 0) -> TrainLog:
    """Uniform random actions over the same budget, logged like training."""
    env = VecEnv(cfg)
    rng = np.random.default_rng(seed)
    env.reset(seed)
    log = TrainLog()
    ep_ret = np.zeros(env.n_envs)
    steps = 0
    while steps < total_steps:
        batch = env.step(rng.uniform(-1, 1, (env.n_envs, 2)))
        ep_ret += batch.rewards
        for i, s in batch.info["summaries"].items():
            log.episodes.append({"step": steps, "ret": float(ep_ret[i]), "reached": s["reached"],
                                 "outcome": s["outcome"]})
            ep_ret[i] = 0.0
        steps += env.n_envs
    env.close()
    return log


def evaluate_policy(model, cfg: EnvConfig, n_episodes: int, seed: int = 10_000, deterministic: bool = True):
    """One episode in each of ``n_episodes`` envs; returns the episode summaries ordered by env."""
    from dataclasses import replace

    from rearrange.envbatch import rollout

    env = VecEnv(replace(cfg, n_envs=n_episodes))
    gen = torch.Generator().manual_seed(seed)

    def policy(env, batch):
        obs = obs_tensors(batch)
        with torch.no_grad():
            dist, _ = model.distribution(obs["groups"], obs["prev_action"])
        a = dist.mean if deterministic else _sample(dist, gen)
        return a.numpy().astype(np.float64)

    out = rollout(env, policy, n_episodes, seed)
    env.close()
    return out


DESK_NET = {"hidden": (64, 64), "widths": (32, 64)}
DESK_PPO = PPOHyper(minibatches=8)


def run_ablation(cfg: EnvConfig, presets=("base", "swr", "swr_td", "ours"), seeds=(0, 1, 2, 3, 4),
                 steps: int = 100_000, hyper: PPOHyper = DESK_PPO, net: dict | None = None, eval_episodes: int = 64,
                 callback=None) -> list[dict]:
    """Train one teacher per (preset, seed) and score its final reach/success rates.

    ``reach_rate`` is the training reach rate over the last 200 finished episodes;
    ``eval_reach_rate`` comes from fresh sampled-action episodes on held-out seeds.
    """
    from dataclasses import replace

    net = DESK_NET if net is None else net
    rows = []
    for seed in seeds:
        for preset in presets:
            c = replace(cfg, preset=preset)
            model = make_teacher(c, seed, **net)
            model, log = train_teacher(c, steps, seed, hyper, model=model)
            summ = evaluate_policy(model, c, eval_episodes, seed=10_000 + seed, deterministic=False)
            row = {
                "preset": preset,
                "seed": seed,
                "steps": steps,
                "reach_rate": log.reach_rate(),
                "eval_reach_rate": float(np.mean([s["reached"] for s in summ])),
                "eval_success_rate": float(np.mean([s["outcome"] == "Success" for s in summ])),
                "final_return": float(log.smoothed()[-1]) if log.episodes else 0.0,
            }
            rows.append(row)
            if callback is not None:
                callback(row)
    return rows
