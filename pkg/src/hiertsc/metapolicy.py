"""High-level policy: transformer over subregions with a prepended learnable token, and an
LSTM over the encoded history that emits the 16-dim sub-goal and the decoded targets for
network waiting time and queue length."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .features import HISTORY_LEN, REGION_DIM
from .neural import DEFAULT_DTYPE, LSTM, Linear, TransformerEncoder, positional_encoding

GOAL_DIM = 16
LSTM_HIDDEN = 256
LSTM_LAYERS = 4


@dataclass
class SubGoal:
    G: Tensor          # (..., 16)
    normalized: Tensor  # (..., 2): waiting-time and queue targets in normalized units
    G_w: Tensor         # denormalized waiting-time target, s
    G_q: Tensor         # denormalized queue target, veh


class RunningScale(nn.Module):
    """Exponential moving average of a positive quantity, used to normalize W and Q."""

    def __init__(self, decay: float = 0.99, floor: float = 1.0):
        super().__init__()
        self.decay, self.floor = decay, floor
        self.register_buffer("value", torch.ones((), dtype=torch.float64))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.float64))

    def update(self, x: float) -> None:
        x = max(float(x), self.floor)
        if not self.initialized:
            self.value.fill_(x)
            self.initialized.fill_(1.0)
        else:
            self.value.mul_(self.decay).add_((1 - self.decay) * x)

    @property
    def scale(self) -> float:
        return float(self.value)


class MetaPolicy(nn.Module):
    def __init__(self, regions: int, d_model: int = REGION_DIM, layers: int = 3, heads: int = 2,
                 ff_dim: int = 165, lstm_hidden: int = LSTM_HIDDEN, lstm_layers: int = LSTM_LAYERS,
                 goal_dim: int = GOAL_DIM, tau: float = 10000.0, dtype=DEFAULT_DTYPE):
        super().__init__()
        if regions < 1:
            raise ValueError("need at least one region")
        self.regions, self.d_model = regions, d_model
        self.token = nn.Parameter(torch.randn(d_model, dtype=dtype) * 0.1)
        self.encoder = TransformerEncoder(layers, d_model, heads, ff_dim, dtype)
        self.lstm = LSTM(regions * d_model, lstm_hidden, lstm_layers, dtype)
        self.project = Linear(lstm_hidden, goal_dim, dtype=dtype)
        self.goal_head = Linear(goal_dim, 2, dtype=dtype)
        pe = torch.as_tensor(positional_encoding(torch.arange(regions + 1).numpy(), d_model, tau), dtype=dtype)
        self.register_buffer("pe", pe)
        self.w_scale = RunningScale()
        self.q_scale = RunningScale()

    def encode(self, snapshots: Tensor) -> tuple[Tensor, Tensor]:
        """(..., M, 4) -> token embedding (..., 4) and region embeddings (..., M, 4)."""
        if snapshots.shape[-2] != self.regions or snapshots.shape[-1] != self.d_model:
            raise ValueError(f"expected (..., {self.regions}, {self.d_model}), got {tuple(snapshots.shape)}")
        token = self.token.expand(*snapshots.shape[:-2], 1, self.d_model)
        x = torch.cat([token, snapshots], dim=-2) + self.pe
        e = self.encoder(x)
        return e[..., 0, :], e[..., 1:, :]

    def global_feature(self, history: Tensor) -> Tensor:
        """F_g from the newest snapshot; history is (..., T, M, 4)."""
        e_g, _ = self.encode(history[..., -1, :, :])
        return e_g

    def subgoal_vector(self, history: Tensor) -> Tensor:
        """(B, T, M, 4) -> G (B, 16)."""
        squeeze = history.dim() == 3
        if squeeze:
            history = history.unsqueeze(0)
        B, T, M, d = history.shape
        _, e_z = self.encode(history)                      # (B, T, M, d)
        seq = e_z.reshape(B, T, M * d).transpose(0, 1)      # (T, B, M*d)
        out, _ = self.lstm(seq)
        G = self.project(out[-1])
        return G[0] if squeeze else G

    def decode(self, G: Tensor) -> Tensor:
        """Nonnegative normalized (waiting-time, queue) targets."""
        return F.softplus(self.goal_head(G))

    def generate_subgoal(self, history: Tensor) -> SubGoal:
        G = self.subgoal_vector(history)
        norm = self.decode(G)
        return SubGoal(G, norm, norm[..., 0] * self.w_scale.scale, norm[..., 1] * self.q_scale.scale)

    def forward(self, history: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (F_g, G, normalized targets) for a (B, T, M, 4) history batch."""
        G = self.subgoal_vector(history)
        return self.global_feature(history), G, self.decode(G)


def encode_timestep(meta: MetaPolicy, snapshot: Tensor) -> tuple[Tensor, Tensor]:
    return meta.encode(snapshot)


def global_feature(meta: MetaPolicy, history: Tensor) -> Tensor:
    return meta.global_feature(history)


def generate_subgoal(meta: MetaPolicy, history: Tensor) -> SubGoal:
    return meta.generate_subgoal(history)


def goal_regression_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Per-sample squared distance summed over (waiting, queue), averaged over the batch."""
    return ((pred - target) ** 2).sum(dim=-1).mean()


def pretrain_meta_step(meta: MetaPolicy, optimizer, history: Tensor, observed: Tensor) -> float:
    """One regression step of decoded targets toward observed normalized (W, Q).

    Returns the loss before the update; a non-finite loss leaves parameters untouched.
    """
    optimizer.zero_grad()
    loss = goal_regression_loss(meta.decode(meta.subgoal_vector(history)), observed)
    if not torch.isfinite(loss):
        return float(loss.detach())
    loss.backward()
    optimizer.step()
    return float(loss.detach())


__all__ = ["MetaPolicy", "SubGoal", "RunningScale", "encode_timestep", "global_feature",
           "generate_subgoal", "pretrain_meta_step", "goal_regression_loss", "HISTORY_LEN"]
