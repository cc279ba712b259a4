"""The UAD network: pointwise scene encoder, angular perception, dreaming
decoder and the ego-query planner with its direction head.

All tensors carry a leading batch axis B (one entry per augmented view
during training).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .bevgeo import SectorPartition
from .netcore import CrossAttention, DistributionHead, GRUCell, LatentDistribution, Linear, ShapeError

COMMANDS = ("turn_left", "turn_right", "go_straight")
RASTER_CHANNELS = 4
QUERY_INIT_STD = 0.02


@dataclass
class RolloutOutput:
    queries: list  # T tensors (B, K, C), Q_a^1..Q_a^T
    priors: list  # T LatentDistribution from Q_a^{t-1}
    posteriors: list  # T LatentDistribution from Q_a^t
    observations: list  # T tensors (B, K, N, C); index 0 is the real feature


@dataclass
class PlanOutput:
    trajectory: torch.Tensor  # (B, T, 2) ego-frame waypoints
    direction: torch.Tensor  # (B, T, 3) over (left, straight, right)
    objectness: torch.Tensor  # (B, K)
    rollout: RolloutOutput
    ego_queries: torch.Tensor  # (B, T, C)


def command_index(command: str) -> int:
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}; expected one of {COMMANDS}")
    return COMMANDS.index(command)


def masked_mean(features: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean over the N axis of (..., K, N, C) counting valid rows only."""
    w = valid.to(features.dtype).unsqueeze(-1)
    count = w.sum(dim=-2).clamp(min=1.0)
    return (features * w).sum(dim=-2) / count


def sector_bearings(partition: SectorPartition) -> np.ndarray:
    """Unit (x, y) direction of every sector's center line, shape (K, 2).

    Seeding two query channels with it gives each sector a geometric
    identity that turns with the scene under rotation, which the planner
    needs to tell a rotated view's heading apart.
    """
    phi = np.deg2rad((np.arange(partition.K) + 0.5) * partition.theta)
    return np.stack([np.sin(phi), np.cos(phi)], axis=-1)


class UADModel(nn.Module):
    def __init__(
        self,
        partition: SectorPartition,
        channels: int = 16,
        horizon: int = 6,
        plan_hidden: int = 32,
        ego_status: bool = False,
        circular_update: bool = True,
        plan_scale: float = 10.0,
        bearing_init: bool = True,
    ):
        super().__init__()
        self.K, self.N, self.C, self.T = partition.K, partition.N, channels, horizon
        self.grid_shape = (partition.grid.height, partition.grid.width)
        self.use_ego_status = ego_status
        self.circular_update = circular_update
        self.plan_scale = plan_scale
        self.register_buffer("gather_index", torch.as_tensor(partition.gather, dtype=torch.long), persistent=False)
        self.register_buffer("valid", torch.as_tensor(partition.valid), persistent=False)
        self.register_buffer("valid_rows", torch.as_tensor(np.flatnonzero(partition.valid)), persistent=False)
        extent = max(float(partition.cell_range.max()), 1e-6)
        self.register_buffer("cell_range", torch.as_tensor(partition.cell_range / extent, dtype=torch.float32), persistent=False)

        C = channels
        self.enc1 = Linear(RASTER_CHANNELS, C)
        self.enc2 = Linear(C, C)
        self.range_embed = Linear(1, C, bias=False)
        queries = torch.randn(self.K, C) * QUERY_INIT_STD
        if bearing_init and C >= 2:
            queries[:, :2] = torch.as_tensor(sector_bearings(partition), dtype=queries.dtype)
        self.angular_queries = nn.Parameter(queries)
        self.perceive_attn = CrossAttention(C)
        self.objectness_head = Linear(C, 1)
        self.gru = GRUCell(C)
        self.pseudo_attn = CrossAttention(C)
        self.dist_head = DistributionHead(C)
        self.ego_queries = nn.Parameter(torch.randn(horizon, C) * QUERY_INIT_STD)
        self.ego_attn = CrossAttention(C)
        plan_in = C + len(COMMANDS) + (2 if ego_status else 0)
        self.plan1 = Linear(plan_in, plan_hidden)
        self.plan2 = Linear(plan_hidden, 2)
        self.direction_head = Linear(C, 3)

    # -- stages -------------------------------------------------------------

    def encode_scene(self, rasters: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 4) rasters -> (B, H, W, C) BEV feature, cell by cell."""
        if rasters.shape[-1] != RASTER_CHANNELS or tuple(rasters.shape[-3:-1]) != self.grid_shape:
            raise ShapeError(f"rasters must be (..., {self.grid_shape[0]}, {self.grid_shape[1]}, {RASTER_CHANNELS}), got {tuple(rasters.shape)}")
        return self.enc2(torch.tanh(self.enc1(rasters)))

    def gather_angular(self, bev: torch.Tensor) -> torch.Tensor:
        """(B, H, W, C) -> zero-padded angular feature (B, K, N, C) with a range embedding."""
        B = bev.shape[0]
        flat = bev.reshape(B, -1, bev.shape[-1])
        fa = flat[:, self.gather_index]  # (B, K, N, C)
        rng = self.range_embed(self.cell_range.to(bev.dtype).unsqueeze(-1))
        return (fa + rng) * self.valid.unsqueeze(-1).to(bev.dtype)

    def angular_perceive(self, fa: torch.Tensor, queries: torch.Tensor | None = None):
        """Each sector query attends over its own sector's valid rows; returns (Q_a, P_a)."""
        B = fa.shape[0]
        if queries is None:
            queries = self.angular_queries.expand(B, self.K, self.C)
        q = queries.unsqueeze(-2)  # (B, K, 1, C)
        valid = self.valid.expand(B, self.K, self.N)
        q = self.perceive_attn(q, fa, fa, valid, allow_empty=True).squeeze(-2)
        scores = torch.sigmoid(self.objectness_head(q)).squeeze(-1)
        return q, scores

    def dreaming_rollout(self, q0: torch.Tensor, fa: torch.Tensor, steps: int | None = None) -> RolloutOutput:
        steps = self.T if steps is None else steps
        if steps < 1:
            raise ValueError("dreaming rollout needs at least one step")
        B = q0.shape[0]
        valid = self.valid.expand(B, self.K, self.N)
        all_keys = torch.ones(B, self.K, dtype=torch.bool, device=fa.device)
        out = RolloutOutput([], [], [], [])
        q_prev, obs = q0, fa
        for t in range(steps):
            if t > 0 and self.circular_update:
                # only real cells query; padding rows stay exactly zero
                rows = obs.reshape(B, self.K * self.N, self.C)[:, self.valid_rows]
                pseudo = self.pseudo_attn(rows, q_prev, q_prev, all_keys)
                obs = fa.new_zeros(B, self.K * self.N, self.C).index_copy(1, self.valid_rows, pseudo)
                obs = obs.reshape(B, self.K, self.N, self.C)
            q = self.gru(q_prev, masked_mean(obs, valid))
            out.queries.append(q)
            out.priors.append(self.dist_head(q_prev))
            out.posteriors.append(self.dist_head(q))
            out.observations.append(obs)
            q_prev = q
        return out

    def plan(self, rollout: RolloutOutput, command: torch.Tensor, ego_status: torch.Tensor | None = None):
        """Ego queries attend to each step's angular queries; returns (P_traj, P_dir, Q_ego)."""
        qa = torch.stack(rollout.queries, dim=1)  # (B, T, K, C)
        B, T = qa.shape[:2]
        if T != self.T:
            raise ShapeError(f"planner expects {self.T} steps, rollout has {T}")
        if command.dtype in (torch.int64, torch.int32):
            if ((command < 0) | (command >= len(COMMANDS))).any():
                raise ValueError("command index out of range")
            onehot = F.one_hot(command, len(COMMANDS)).to(qa.dtype)
        else:
            onehot = command.to(qa.dtype)
        ego = self.ego_queries.expand(B, T, self.C).unsqueeze(-2)
        keys_valid = torch.ones(B, T, self.K, dtype=torch.bool, device=qa.device)
        ego = self.ego_attn(ego, qa, qa, keys_valid).squeeze(-2)  # (B, T, C)
        parts = [ego, onehot.unsqueeze(1).expand(B, T, onehot.shape[-1])]
        if self.use_ego_status:
            if ego_status is None:
                raise ValueError("model was built with ego status but none was given")
            parts.append(ego_status.to(qa.dtype).unsqueeze(1).expand(B, T, 2))
        x = torch.cat(parts, dim=-1)
        traj = self.plan2(torch.tanh(self.plan1(x))) * self.plan_scale
        direction = torch.softmax(self.direction_head(ego), dim=-1)
        return traj, direction, ego

    # -- full pass ------------------------------------------------------------

    def forward_features(self, bev: torch.Tensor, command, ego_status=None) -> PlanOutput:
        fa = self.gather_angular(bev)
        q0, scores = self.angular_perceive(fa)
        rollout = self.dreaming_rollout(q0, fa)
        traj, direction, ego = self.plan(rollout, command, ego_status)
        return PlanOutput(traj, direction, scores, rollout, ego)

    def forward(self, rasters: torch.Tensor, command, ego_status=None) -> PlanOutput:
        return self.forward_features(self.encode_scene(rasters), command, ego_status)

    def describe(self) -> dict:
        return {"K": self.K, "N": self.N, "C": self.C, "T": self.T, "grid": list(self.grid_shape), "ego_status": self.use_ego_status}


def as_tensor(x, dtype) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(x), dtype=dtype)
