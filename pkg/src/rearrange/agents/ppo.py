"""Clipped-surrogate PPO with GAE, written against a minimal model protocol.

A model only needs ``evaluate(obs_dict, actions) -> (logprob, entropy, value)``,
so the same update drives the teacher and toy sanity policies.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class PPOHyper:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 8
    minibatches: int = 32
    lr: float = 2.5e-4
    max_grad_norm: float = 1.0
    vf_coef: float = 0.5
    ent_coef: float = 0.003
    horizon: int = 32
    norm_adv: bool = True


def compute_gae(rewards, values, dones, last_value, gamma: float = 0.99, lam: float = 0.95):
    """GAE over a (T, E) rollout; ``dones[t]`` marks that step t ended its episode."""
    rewards = np.asarray(rewards, np.float64)
    values = np.asarray(values, np.float64)
    dones = np.asarray(dones, np.float64)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    gae = np.zeros_like(rewards[0])
    next_v = np.asarray(last_value, np.float64)
    for t in range(T - 1, -1, -1):
        nonterm = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * nonterm - values[t]
        gae = delta + gamma * lam * nonterm * gae
        adv[t] = gae
        next_v = values[t]
    return adv, adv + values


class RolloutBuffer:
    """Fixed-horizon storage; advantages are recomputed on every ``finish`` call."""

    def __init__(self, horizon: int, n_envs: int, obs_spec: dict, act_dim: int = 2):
        self.horizon, self.n_envs = horizon, n_envs
        self.obs = {k: np.zeros((horizon, n_envs, *shape)) for k, shape in obs_spec.items()}
        self.actions = np.zeros((horizon, n_envs, act_dim))
        self.logprobs = np.zeros((horizon, n_envs))
        self.values = np.zeros((horizon, n_envs))
        self.rewards = np.zeros((horizon, n_envs))
        self.dones = np.zeros((horizon, n_envs))
        self.ptr = 0

    @property
    def full(self) -> bool:
        return self.ptr == self.horizon

    def add(self, obs: dict, action, logprob, value, reward, done):
        if self.full:
            raise IndexError("rollout buffer is full")
        t = self.ptr
        for k, v in obs.items():
            self.obs[k][t] = v
        self.actions[t] = action
        self.logprobs[t] = logprob
        self.values[t] = value
        self.rewards[t] = reward
        self.dones[t] = done
        self.ptr += 1

    def finish(self, last_value, gamma: float, lam: float) -> dict:
        if not self.full:
            raise ValueError("rollout buffer is not full")
        adv, ret = compute_gae(self.rewards, self.values, self.dones, last_value, gamma, lam)
        n = self.horizon * self.n_envs
        flat = {k: v.reshape(n, *v.shape[2:]) for k, v in self.obs.items()}
        return {
            "obs": flat,
            "actions": self.actions.reshape(n, -1),
            "logprobs": self.logprobs.reshape(n),
            "values": self.values.reshape(n),
            "advantages": adv.reshape(n),
            "returns": ret.reshape(n),
        }

    def clear(self):
        self.ptr = 0


def _t(x, dtype):
    return torch.as_tensor(x, dtype=dtype)


def ppo_loss(model, obs, actions, old_logp, adv, ret, hyper: PPOHyper):
    logp, ent, value = model.evaluate(obs, actions)
    ratio = torch.exp(logp - old_logp)
    s1 = ratio * adv
    if math.isinf(hyper.clip):
        surr = s1
    else:
        surr = torch.min(s1, torch.clamp(ratio, 1 - hyper.clip, 1 + hyper.clip) * adv)
    pg = -surr.mean()
    vloss = 0.5 * ((value - ret) ** 2).mean()
    entropy = ent.mean()
    loss = pg + hyper.vf_coef * vloss - hyper.ent_coef * entropy
    return loss, {"pg": pg.item(), "vf": vloss.item(), "entropy": entropy.item(),
                  "clipfrac": ((ratio - 1).abs() > hyper.clip).float().mean().item()}


def ppo_update(model, optimizer, data: dict, hyper: PPOHyper, generator: torch.Generator | None = None,
               dtype=torch.float32) -> dict:
    """Run ``epochs`` passes of ``minibatches`` shuffled minibatches over ``data``."""
    n = len(data["advantages"])
    obs = {k: _t(v, dtype) for k, v in data["obs"].items()}
    actions = _t(data["actions"], dtype)
    old_logp = _t(data["logprobs"], dtype)
    adv_all = _t(data["advantages"], dtype)
    ret = _t(data["returns"], dtype)
    mb = max(1, n // hyper.minibatches)
    stats = {}
    for _ in range(hyper.epochs):
        perm = torch.randperm(n, generator=generator)
        for start in range(0, mb * hyper.minibatches, mb):
            idx = perm[start:start + mb]
            if len(idx) == 0:
                continue
            adv = adv_all[idx]
            if hyper.norm_adv and len(idx) > 1:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            loss, stats = ppo_loss(model, {k: v[idx] for k, v in obs.items()}, actions[idx], old_logp[idx], adv,
                                   ret[idx], hyper)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite PPO loss: {stats}")
            optimizer.zero_grad()
            loss.backward()
            if hyper.max_grad_norm is not None and math.isfinite(hyper.max_grad_norm):
                torch.nn.utils.clip_grad_norm_(model.parameters(), hyper.max_grad_norm)
            optimizer.step()
    return stats
