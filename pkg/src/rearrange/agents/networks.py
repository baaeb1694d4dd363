"""Group encoder, actor-critic heads and the depth-layer student encoder."""
from __future__ import annotations

import math

import torch
from torch import nn

MASK_VALUE = -10.0
N_GROUPS = 4  # act, anc, obs, ref


def mlp(sizes, act=nn.ReLU, out_act=None) -> nn.Sequential:
    layers = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(act())
        elif out_act is not None:
            layers.append(out_act())
    return nn.Sequential(*layers)


def point_validity(points: torch.Tensor, lengths=None, mask_value: float = MASK_VALUE) -> torch.Tensor:
    """True for points that are not the mask sentinel (and inside the group's length)."""
    valid = ~(points == mask_value).all(dim=-1)
    if lengths is not None:
        idx = torch.arange(points.shape[-2], device=points.device)
        lengths = torch.as_tensor(lengths, device=points.device)
        valid = valid & (idx < lengths[:, None])
    return valid


class GroupEncoder(nn.Module):
    """Shared per-point MLP, masked max-pool, linear projection, plus a visibility bit.

    Input ``(..., P, 3)``; output ``(..., latent_dim + 1)``.  Masked points are
    dropped before pooling; a group with no valid point maps to zeros with bit 0.
    With ``drop_masked=False`` sentinel points are encoded like any other point.
    """

    def __init__(self, widths=(64, 128), latent_dim: int = 64, drop_masked: bool = True):
        super().__init__()
        self.point_mlp = mlp((3, *widths), out_act=nn.ReLU)
        self.proj = nn.Linear(widths[-1], latent_dim)
        self.latent_dim = latent_dim
        self.drop_masked = drop_masked

    @property
    def out_dim(self) -> int:
        return self.latent_dim + 1

    def forward(self, points: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        if valid is None:
            valid = point_validity(points)
        if not self.drop_masked:
            valid = torch.ones_like(valid)
        feat = self.point_mlp(points)
        feat = feat.masked_fill(~valid[..., None], -math.inf)
        pooled = feat.max(dim=-2).values
        bit = valid.any(dim=-1, keepdim=True).to(points.dtype)
        pooled = torch.where(bit > 0, pooled, torch.zeros_like(pooled))
        z = self.proj(pooled) * bit
        return torch.cat([z, bit], dim=-1)


class ActorCritic(nn.Module):
    """Teacher: group latents + previous action -> tanh-squashed Gaussian mean, learned log-std, value."""

    def __init__(self, latent_dim: int = 64, hidden=(256, 256), widths=(64, 128), init_std: float = 0.5,
                 drop_masked: bool = True, group_lengths=(8, 8, 24, 8)):
        super().__init__()
        self.encoder = GroupEncoder(widths, latent_dim, drop_masked)
        self.in_dim = 2 + N_GROUPS * self.encoder.out_dim
        self.actor = mlp((self.in_dim, *hidden, 2), act=nn.Tanh)
        self.critic = mlp((self.in_dim, *hidden, 1), act=nn.Tanh)
        self.log_std = nn.Parameter(torch.full((2,), math.log(init_std)))
        self.register_buffer("group_lengths", torch.as_tensor(group_lengths, dtype=torch.long))

    def latents(self, groups: torch.Tensor) -> torch.Tensor:
        """(B, 4, P, 3) -> (B, 4, d+1); each group is encoded over its own length only."""
        out = []
        for g, n in enumerate(self.group_lengths.tolist()):
            pts = groups[..., g, :n, :]
            out.append(self.encoder(pts, point_validity(pts)))
        return torch.stack(out, dim=-2)

    def heads(self, latents: torch.Tensor, prev_action: torch.Tensor):
        x = torch.cat([prev_action, latents.flatten(-2)], dim=-1)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} input features, got {x.shape[-1]}")
        mean = torch.tanh(self.actor(x))
        value = self.critic(x).squeeze(-1)
        return mean, self.log_std.expand_as(mean), value

    def forward(self, groups: torch.Tensor, prev_action: torch.Tensor):
        return self.heads(self.latents(groups), prev_action)

    def distribution(self, groups, prev_action):
        mean, log_std, value = self(groups, prev_action)
        return torch.distributions.Normal(mean, log_std.exp()), value

    def evaluate(self, obs: dict, actions: torch.Tensor):
        dist, value = self.distribution(obs["groups"], obs["prev_action"])
        return dist.log_prob(actions).sum(-1), dist.entropy().sum(-1), value

    @torch.no_grad()
    def act(self, groups, prev_action, deterministic: bool = False):
        dist, value = self.distribution(groups, prev_action)
        a = dist.mean if deterministic else dist.sample()
        return a, dist.log_prob(a).sum(-1), value


def policy_forward(model: ActorCritic, latents: torch.Tensor, prev_action: torch.Tensor):
    """(mean, log_std, value) from precomputed group latents."""
    return model.heads(latents, prev_action)


class DepthEncoder(nn.Module):
    """Per-layer conv encoder for group depth images (shared over act/anc/obs layers)."""

    def __init__(self, latent_dim: int = 64, pool=(6, 7)):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(1, 32, 5, stride=2), nn.ReLU(),
            nn.Conv2d(32, 64, 5, stride=2), nn.ReLU(),
            nn.Conv2d(64, 64, 3, stride=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(pool),
        )
        self.fc = nn.Linear(64 * pool[0] * pool[1], latent_dim)
        self.latent_dim = latent_dim

    def forward(self, layers: torch.Tensor) -> torch.Tensor:
        """(B, L, H, W) -> (B, L, d+1); an empty layer gives the zero latent with bit 0."""
        b, n, h, w = layers.shape
        x = self.conv(layers.reshape(b * n, 1, h, w))
        z = self.fc(x.flatten(1)).reshape(b, n, -1)
        bit = (layers.flatten(2) > 0).any(-1, keepdim=True).to(z.dtype)
        return torch.cat([z * bit, bit], dim=-1)


class StudentPolicy(nn.Module):
    """Depth-layer student with the teacher's MLP layout; the reference slot is always empty."""

    def __init__(self, latent_dim: int = 64, hidden=(256, 256), init_std: float = 0.5):
        super().__init__()
        self.encoder = DepthEncoder(latent_dim)
        self.in_dim = 2 + N_GROUPS * (latent_dim + 1)
        self.actor = mlp((self.in_dim, *hidden, 2), act=nn.Tanh)
        self.log_std = nn.Parameter(torch.full((2,), math.log(init_std)))
        self.latent_dim = latent_dim

    def latents(self, layers: torch.Tensor) -> torch.Tensor:
        z = self.encoder(layers)  # (B,3,d+1)
        ref = torch.zeros(z.shape[0], 1, z.shape[-1], dtype=z.dtype, device=z.device)
        return torch.cat([z, ref], dim=1)

    def forward(self, layers, prev_action):
        lat = self.latents(layers)
        x = torch.cat([prev_action, lat.flatten(-2)], dim=-1)
        return torch.tanh(self.actor(x)), lat

    def warm_start(self, teacher: ActorCritic):
        """Copy the teacher's policy MLP weights into the student MLP."""
        self.actor.load_state_dict(teacher.actor.state_dict())


class KeypointStudent(nn.Module):
    """Student with the teacher's architecture (self-distillation sanity runs)."""

    def __init__(self, **kw):
        super().__init__()
        self.net = ActorCritic(**kw)

    @property
    def actor(self):
        return self.net.actor

    def forward(self, groups, prev_action):
        lat = self.net.latents(groups)
        mean, _, _ = self.net.heads(lat, prev_action)
        return mean, lat

    def warm_start(self, teacher: ActorCritic):
        self.net.actor.load_state_dict(teacher.actor.state_dict())
