"""Teacher-to-student distillation: action regression plus relational (cosine-similarity) matching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from rearrange.agents.networks import ActorCritic
from rearrange.agents.trainer import obs_tensors

N_REL = 3  # act, anc, obs


@dataclass(frozen=True)
class DistillConfig:
    action_weight: float = 1.0
    lambda_rel: float = 1.0
    lr: float = 1e-3
    warm_start: bool = True
    iterations: int = 200
    explore_std: float = 0.0  # noise on the student's executed actions

    def __post_init__(self):
        if self.action_weight < 0 or self.lambda_rel < 0:
            raise ValueError("loss weights must be non-negative")


def relational_similarity(latents, eps: float = 1e-12):
    """Pairwise cosine similarity over the last-but-one axis; entries touching a zero latent are 0.

    ``latents`` has shape (..., G, d) (visibility bits excluded).  Accepts numpy or torch.
    """
    as_np = isinstance(latents, np.ndarray)
    z = torch.as_tensor(latents)
    norm = z.norm(dim=-1, keepdim=True)
    nonzero = norm > eps
    unit = torch.where(nonzero, z / torch.where(nonzero, norm, torch.ones_like(norm)), torch.zeros_like(z))
    s = unit @ unit.transpose(-1, -2)
    return s.numpy() if as_np else s


def relational_loss(s_teacher, s_student):
    """Squared Frobenius distance, averaged over any leading batch axes."""
    as_np = isinstance(s_student, np.ndarray)
    d = torch.as_tensor(s_teacher) - torch.as_tensor(s_student)
    val = (d**2).sum(dim=(-1, -2)).mean()
    return float(val) if as_np else val


def teacher_labels(teacher: ActorCritic, obs: dict):
    with torch.no_grad():
        lat = teacher.latents(obs["groups"])
        mean, _, _ = teacher.heads(lat, obs["prev_action"])
    return mean, relational_similarity(lat[..., :N_REL, :-1])


def distill_loss(student_mean, student_lat, teacher_mean, teacher_sim, cfg: DistillConfig):
    """Returns (total, action_mse, relational) with total = w_a * mse + lambda_rel * L_rel."""
    mse = ((student_mean - teacher_mean) ** 2).sum(-1).mean()
    rel = relational_loss(teacher_sim, relational_similarity(student_lat[..., :N_REL, :-1]))
    return cfg.action_weight * mse + cfg.lambda_rel * rel, mse, rel


class Distiller:
    """DAgger-style loop: the student drives, the teacher labels the visited states online."""

    def __init__(self, teacher: ActorCritic, student: torch.nn.Module, env, cfg: DistillConfig, student_obs=None,
                 seed: int = 0):
        self.teacher, self.student, self.env, self.cfg = teacher, student, env, cfg
        # student_obs(env, batch) -> tensor fed to the student; default: the teacher's keypoint groups
        self.student_obs = student_obs or (lambda env, batch: obs_tensors(batch)["groups"])
        if cfg.warm_start:
            student.warm_start(teacher)
        self.opt = torch.optim.Adam(student.parameters(), lr=cfg.lr)
        self.gen = torch.Generator().manual_seed(seed)
        self.batch = env.reset(seed)
        self.history: list[dict] = []

    def step(self) -> dict:
        """One environment step under the student policy followed by one supervised update."""
        cfg = self.cfg
        obs = obs_tensors(self.batch)
        t_mean, t_sim = teacher_labels(self.teacher, obs)
        s_in = self.student_obs(self.env, self.batch)
        s_mean, s_lat = self.student(s_in, obs["prev_action"])
        loss, mse, rel = distill_loss(s_mean, s_lat, t_mean, t_sim, cfg)
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        a = s_mean.detach()
        if cfg.explore_std > 0:
            a = a + cfg.explore_std * torch.randn(a.shape, generator=self.gen)
        self.batch = self.env.step(a.numpy().astype(np.float64))
        row = {"loss": loss.item(), "action_mse": mse.item(), "relational": rel.item()}
        self.history.append(row)
        return row


def distill_step(distiller: Distiller) -> dict:
    return distiller.step()


def distill(teacher, student, env, cfg: DistillConfig, student_obs=None, seed: int = 0, callback=None):
    d = Distiller(teacher, student, env, cfg, student_obs, seed)
    for _ in range(cfg.iterations):
        row = d.step()
        if callback is not None:
            callback(row)
    return student, d.history


def iterations_to_threshold(history, threshold: float, key: str = "action_mse") -> int:
    for i, row in enumerate(history):
        if row[key] < threshold:
            return i + 1
    return len(history) + 1
