"""Shared-parameter intersection controller: local encoding, graph attention concat over up to
four neighbors, fusion with the global feature, shared trunk, actor and dual-branch critic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .features import OBS_DIM
from .network import NUM_PHASES, Network
from .neural import DEFAULT_DTYPE, LEAKY_SLOPE, Dropout, Linear

MAX_NEIGHBORS = 4
GLOBAL_DIM = 4
TRUNK_DIM = 114
LATENT_DIM = 56


@dataclass
class PolicyOutput:
    logits: Tensor        # (..., N, 8)
    value: Tensor         # (..., N, 1)
    latent_plan: Tensor   # (..., N, 56)


def neighbor_table(network: Network) -> np.ndarray:
    """(N, 4) neighbor ids in distance-then-id order, padded with -1."""
    table = -np.ones((network.num_intersections, MAX_NEIGHBORS), dtype=np.int64)
    for inter in network.intersections:
        table[inter.id, :len(inter.neighbors)] = inter.neighbors
    return table


def neighbor_table_from_adjacency(adjacency) -> np.ndarray:
    """Neighbor table from a boolean adjacency matrix; neighbors ordered by column index."""
    A = np.asarray(adjacency, dtype=bool)
    table = -np.ones((A.shape[0], MAX_NEIGHBORS), dtype=np.int64)
    for i, row in enumerate(A):
        nbrs = np.flatnonzero(row)
        if len(nbrs) > MAX_NEIGHBORS:
            raise ValueError(f"node {i} has {len(nbrs)} neighbors; at most {MAX_NEIGHBORS} supported")
        table[i, :len(nbrs)] = nbrs
    return table


class GraphAttentionConcat(nn.Module):
    """z_i = h_i || a_i1 h_j1 || ... || a_i4 h_j4 with softmax(LeakyReLU(a . [h_i || h_j])) weights."""

    def __init__(self, width: int = OBS_DIM, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.width = width
        bound = 1.0 / np.sqrt(2 * width)
        self.attn = nn.Parameter(torch.empty(2 * width, dtype=dtype).uniform_(-bound, bound))
        self.last_alpha: Tensor | None = None

    def forward(self, H: Tensor, neighbors, enabled: bool = True) -> Tensor:
        table = torch.as_tensor(np.asarray(neighbors), dtype=torch.long)
        if table.dim() != 2 or table.shape[1] > MAX_NEIGHBORS:
            raise ValueError(f"neighbor table must be (N, <= {MAX_NEIGHBORS}), got {tuple(table.shape)}")
        if table.shape[1] < MAX_NEIGHBORS:
            pad = -torch.ones(table.shape[0], MAX_NEIGHBORS - table.shape[1], dtype=torch.long)
            table = torch.cat([table, pad], dim=1)
        N = H.shape[-2]
        mask = table >= 0                                  # (N, 4)
        Hn = H[..., table.clamp(min=0), :]                 # (..., N, 4, F)
        if not enabled:
            zeros = torch.zeros_like(Hn).flatten(-2)
            return torch.cat([H, zeros], dim=-1)
        a_self, a_nbr = self.attn[:self.width], self.attn[self.width:]
        e = F.leaky_relu((H @ a_self).unsqueeze(-1) + Hn @ a_nbr, LEAKY_SLOPE)   # (..., N, 4)
        e = e.masked_fill(~mask, -1e9)
        alpha = torch.softmax(e, dim=-1)
        alpha = torch.where(mask, alpha, torch.zeros_like(alpha))   # isolated nodes: all zero
        self.last_alpha = alpha.detach()
        weighted = alpha.unsqueeze(-1) * Hn
        assert weighted.shape[-3] == N
        return torch.cat([H, weighted.flatten(-2)], dim=-1)


def fuse(Z: Tensor, F_g: Tensor) -> Tensor:
    """Broadcast F_g (..., 4) to every node of Z (..., N, 330) and concatenate."""
    g = F_g.unsqueeze(-2).expand(*Z.shape[:-1], F_g.shape[-1])
    return torch.cat([Z, g], dim=-1)


class SharedHead(nn.Module):
    def __init__(self, sizes=(334, 256, 128, TRUNK_DIM), dropout: float = 0.1, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.layers = nn.ModuleList(Linear(a, b, gain=np.sqrt(2), dtype=dtype) for a, b in zip(sizes, sizes[1:]))
        self.dropout = Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = self.dropout(torch.relu(layer(x)))
        return x


class Actor(nn.Module):
    def __init__(self, width: int = TRUNK_DIM, actions: int = NUM_PHASES, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.hidden = Linear(width, width // 2, gain=np.sqrt(2), dtype=dtype)
        self.out = Linear(width // 2, actions, gain=0.01, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.out(torch.relu(self.hidden(x)))


class Critic(nn.Module):
    """Branch 1 (width -> 57) and branch 2 (width -> 57 -> latent) feed the value head jointly."""

    def __init__(self, width: int = TRUNK_DIM, latent: int = LATENT_DIM, dtype=DEFAULT_DTYPE):
        super().__init__()
        half = width // 2
        self.branch1 = Linear(width, half, gain=np.sqrt(2), dtype=dtype)
        self.branch2 = Linear(width, half, gain=np.sqrt(2), dtype=dtype)
        self.latent = Linear(half, latent, dtype=dtype)
        self.value = Linear(2 * half, 1, gain=1.0, dtype=dtype)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        b1 = torch.relu(self.branch1(x))
        b2 = torch.relu(self.branch2(x))
        return self.value(torch.cat([b1, b2], dim=-1)), self.latent(b2)


class SubPolicy(nn.Module):
    def __init__(self, obs_dim: int = OBS_DIM, global_dim: int = GLOBAL_DIM, goal_dim: int = 0,
                 dropout: float = 0.1, use_gac: bool = True, use_global: bool = True, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.obs_dim, self.goal_dim = obs_dim, goal_dim
        self.use_gac, self.use_global = use_gac, use_global
        self.local = Linear(obs_dim, obs_dim, dtype=dtype)
        self.gac = GraphAttentionConcat(obs_dim, dtype)
        fused = obs_dim * (1 + MAX_NEIGHBORS) + global_dim + goal_dim
        self.head = SharedHead((fused, 256, 128, TRUNK_DIM), dropout, dtype)
        self.actor = Actor(TRUNK_DIM, NUM_PHASES, dtype)
        self.critic = Critic(TRUNK_DIM, LATENT_DIM, dtype)

    def encode_local(self, obs: Tensor) -> Tensor:
        return F.leaky_relu(self.local(obs), LEAKY_SLOPE)

    def fused_input(self, obs: Tensor, neighbors, F_g: Tensor, goal: Tensor | None = None) -> Tensor:
        Z = self.gac(self.encode_local(obs), neighbors, enabled=self.use_gac)
        if not self.use_global:
            F_g = torch.zeros_like(F_g)
        X = fuse(Z, F_g)
        if self.goal_dim:
            if goal is None:
                raise ValueError("this policy was built to take the sub-goal vector as input")
            X = fuse(X, goal)
        return X

    def forward(self, obs: Tensor, neighbors, F_g: Tensor, goal: Tensor | None = None) -> PolicyOutput:
        trunk = self.head(self.fused_input(obs, neighbors, F_g, goal))
        value, latent = self.critic(trunk)
        return PolicyOutput(self.actor(trunk), value, latent)


def encode_local(policy: SubPolicy, obs: Tensor) -> Tensor:
    return policy.encode_local(obs)


def gac(policy: SubPolicy, H: Tensor, adjacency_or_table) -> Tensor:
    table = np.asarray(adjacency_or_table)
    if table.dtype == bool or (table.ndim == 2 and table.shape[0] == table.shape[1] and table.shape[1] > MAX_NEIGHBORS):
        table = neighbor_table_from_adjacency(table)
    return policy.gac(H, table)
