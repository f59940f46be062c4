"""Rewards, GAE, clipped actor-critic loss, the adversarial goal losses and the joint training loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import neural
from .features import (HISTORY_LEN, WAIT_CLIP, IntersectionStats,
                       RegionalFeaturizer, RegionalHistory, all_observations)
from .metapolicy import MetaPolicy, goal_regression_loss, pretrain_meta_step
from .network import Network, build_grid_network
from .simulator import (CONTROL_STEP, EPISODE_SECONDS, FlowSpec, episode_metrics,
                        max_pressure_controller, new_state)
from .subpolicy import SubPolicy, neighbor_table

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_gac", "no_global_feature", "no_subgoal", "no_meta")
LOG_COLUMNS = ("episode", "seed", "variant", "mean_reward", "ATT", "ADT", "meta_loss", "sub_loss", "grad_norm",
               "mean_local_reward")
PAPER_TOTAL_STEPS = 380000


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    beta_q: float = 0.5
    beta_w: float = 0.5
    eta1: float = 0.1
    eta2: float = 0.1
    clip: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 1.0
    gamma: float = 0.99
    lam: float = 0.95

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if not 0 < self.clip < 1:
            raise ValueError("clip must be in (0, 1)")
        if self.gamma > 1 or self.lam > 1:
            raise ValueError("gamma and lam must lie in [0, 1]")


@dataclass(frozen=True)
class RewardTerms:
    ql: float
    wt: float
    dt: float
    ps: float
    ss: float


@dataclass(frozen=True)
class GlobalAggregates:
    W: float            # total head-vehicle waiting time over all signalized approaches, s
    Q: float            # total stopped vehicles, veh
    W_norm: float = float("nan")
    Q_norm: float = float("nan")


# -- rewards ---------------------------------------------------------------------------

def reward_terms(st: IntersectionStats) -> RewardTerms:
    cap = float(st.capacity[st.present].sum()) or 1.0
    lanes = max(int(st.present.sum()), 1)
    return RewardTerms(
        ql=float(st.queued.sum()) / cap,
        wt=float(np.minimum(st.head_wait, WAIT_CLIP).sum()) / (WAIT_CLIP * lanes),
        dt=min(st.mean_delay / CONTROL_STEP, 1.0),
        ps=min(abs(st.pressure) / (st.movements * float(st.capacity.max())), 1.0),
        ss=min(st.mean_speed / st.speed_limit, 1.0),
    )


def local_reward(t: RewardTerms) -> float:
    return -(t.ql + t.wt + t.dt + t.ps - t.ss)


def global_aggregates(stats: Sequence[IntersectionStats]) -> GlobalAggregates:
    return GlobalAggregates(W=float(sum(st.head_wait.sum() for st in stats)),
                            Q=float(sum(st.queued.sum() for st in stats)))


def goal_reward(W: float, Q: float, G_w: float, G_q: float, w: LossWeights, strict_paper: bool = False) -> float:
    """Positive when the realized (W, Q) beat the goals. All inputs in normalized units.

    strict_paper pairs waiting time with the queue goal and vice versa, as originally printed.
    """
    if strict_paper:
        return -(w.beta_q * (W - G_q) + w.beta_w * (Q - G_w))
    return -(w.beta_w * (W - G_w) + w.beta_q * (Q - G_q))


def alignment_gap(outcome: torch.Tensor, goal: torch.Tensor, w: LossWeights, strict_paper: bool = False):
    """beta-weighted (outcome - goal), i.e. -goal_reward; broadcasts over leading dims."""
    W, Q = outcome[..., 0], outcome[..., 1]
    G_w, G_q = goal[..., 0], goal[..., 1]
    if strict_paper:
        return w.beta_q * (W - G_q) + w.beta_w * (Q - G_w)
    return w.beta_w * (W - G_w) + w.beta_q * (Q - G_q)


# -- advantage estimation ----------------------------------------------------------------

def gae(rewards, values, gamma: float = 0.99, lam: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and value targets; rewards (T, ...) and values (T + 1, ...)."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.shape[0] != rewards.shape[0] + 1:
        raise ValueError(f"values must have length T+1={rewards.shape[0] + 1}, got {values.shape[0]}")
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    for t in reversed(range(rewards.shape[0])):
        delta = rewards[t] + gamma * values[t + 1] - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv, adv + values[:-1]


def normalize_advantages(adv: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    if adv.numel() < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std(unbiased=False) + eps)


@dataclass
class ACLoss:
    policy: torch.Tensor
    value: torch.Tensor
    entropy: torch.Tensor
    total: torch.Tensor
    excluded: int = 0


def ppo_loss(logits: torch.Tensor, values: torch.Tensor, actions: torch.Tensor, old_logp: torch.Tensor,
             advantages: torch.Tensor, returns: torch.Tensor, w: LossWeights, normalize: bool = True) -> ACLoss:
    """Clipped-ratio surrogate + squared value error - entropy bonus, averaged over samples."""
    dist = torch.distributions.Categorical(logits=logits)
    logp = dist.log_prob(actions)
    ratio = torch.exp(logp - old_logp)
    ok = torch.isfinite(ratio)
    excluded = int((~ok).sum())
    if excluded:
        logp, ratio, advantages, returns, values = (t[ok] for t in (logp, ratio, advantages, returns, values))
        entropy = dist.entropy()[ok].mean()
    else:
        entropy = dist.entropy().mean()
    if normalize:
        advantages = normalize_advantages(advantages)
    surr = torch.min(ratio * advantages, torch.clamp(ratio, 1 - w.clip, 1 + w.clip) * advantages)
    policy = -surr.mean()
    value = ((values - returns) ** 2).mean()
    total = policy - w.entropy_coef * entropy + w.value_coef * value
    return ACLoss(policy, value, entropy, total, excluded)


def meta_loss(goals: torch.Tensor, outcomes: torch.Tensor, w: LossWeights, strict_paper: bool = False) -> torch.Tensor:
    """mean_t ||goal_t - outcome_t||^2 + eta1 * r_g,t, with goals and outcomes (T, 2) normalized.

    r_g = -alignment_gap, so a positive eta1 rewards goals set below the realized outcome.
    """
    r_g = -alignment_gap(outcomes, goals, w, strict_paper)
    return goal_regression_loss(goals, outcomes) + w.eta1 * r_g.mean()


def sub_loss(ac: ACLoss, outcomes: torch.Tensor, goals: torch.Tensor, w: LossWeights,
             strict_paper: bool = False) -> torch.Tensor:
    """L_AC + eta2 * alignment gap; the gap is a constant with respect to policy parameters."""
    gap = alignment_gap(outcomes.detach(), goals.detach(), w, strict_paper).mean()
    return ac.total + w.eta2 * gap


class ValueNormalizer(torch.nn.Module):
    """Debiased running mean and variance of value targets; the critic regresses standardized returns."""

    def __init__(self, beta: float = 0.999, eps: float = 1e-5):
        super().__init__()
        self.beta, self.eps = beta, eps
        self.register_buffer("mean", torch.zeros((), dtype=torch.float64))
        self.register_buffer("mean_sq", torch.zeros((), dtype=torch.float64))
        self.register_buffer("debias", torch.zeros((), dtype=torch.float64))

    def update(self, x) -> None:
        x = torch.as_tensor(np.asarray(x), dtype=torch.float64)
        self.mean.mul_(self.beta).add_((1 - self.beta) * x.mean())
        self.mean_sq.mul_(self.beta).add_((1 - self.beta) * (x ** 2).mean())
        self.debias.mul_(self.beta).add_(1 - self.beta)

    def stats(self) -> tuple[float, float]:
        if float(self.debias) == 0.0:
            return 0.0, 1.0
        d = max(float(self.debias), self.eps)
        mean = float(self.mean) / d
        var = max(float(self.mean_sq) / d - mean ** 2, 1e-4)
        return mean, math.sqrt(var)

    def normalize(self, x):
        mean, std = self.stats()
        return (x - mean) / std

    def denormalize(self, x):
        mean, std = self.stats()
        return x * std + mean


# -- configuration ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    rows: int = 2
    cols: int = 2
    region_rows: int = 1
    region_cols: int = 1
    link_length: float = 200.0
    speed_limit: float = 13.89
    flow_pattern: str = "multimodal_gaussian"
    min_rate: float = 0.05
    max_rate: float = 0.10
    flow_seed: int = 0
    horizon: int = EPISODE_SECONDS
    seed: int = 0
    variant: str = "full"
    episodes: int = 10
    parallel_envs: int = 1
    epochs: int = 4
    minibatch_steps: int = 60
    lr: float = 3e-4
    max_grad_norm: float = 10.0
    dropout: float = 0.1
    beta_q: float = 0.5
    beta_w: float = 0.5
    eta1: float = 0.1
    eta2: float = 0.1
    clip: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 1.0
    gamma: float = 0.99
    lam: float = 0.95
    strict_paper_mode: bool = False
    goal_as_input: bool = False
    latent_aux: bool = False
    pretrain_episodes: int = 0
    pretrain_steps: int = 100
    checkpoint_every: int = 10
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.episodes < 0 or self.parallel_envs < 1 or self.epochs < 1 or self.minibatch_steps < 1:
            raise ValueError("episodes, parallel_envs, epochs and minibatch_steps must be positive")
        if self.horizon % CONTROL_STEP:
            raise ValueError(f"horizon must be a multiple of the {CONTROL_STEP} s control step")

    @property
    def weights(self) -> LossWeights:
        base = LossWeights(self.beta_q, self.beta_w, self.eta1, self.eta2, self.clip, self.entropy_coef,
                           self.value_coef, self.gamma, self.lam)
        if self.variant in ("no_subgoal", "no_meta"):
            base = replace(base, eta1=0.0, eta2=0.0)
        return base

    @property
    def uses_goal_reward(self) -> bool:
        return self.variant not in ("no_subgoal", "no_meta")

    @property
    def torch_dtype(self):
        return torch.float32 if self.dtype == "float32" else torch.float64

    @property
    def steps_per_episode(self) -> int:
        return self.horizon // CONTROL_STEP

    def network(self) -> Network:
        return build_grid_network(self.rows, self.cols, self.link_length, self.speed_limit,
                                  self.region_rows, self.region_cols)

    def flow(self) -> FlowSpec:
        return FlowSpec(self.flow_pattern, self.min_rate, self.max_rate, seed=self.flow_seed, horizon=self.horizon)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


DESK_LR = 3e-3


def desk_config(**overrides) -> TrainConfig:
    """Grid2×2 profile for short single-core runs: as the defaults but with a 10× learning rate.

    At the default 3e-4 a few hundred 240-step episodes barely move the policy; the larger step
    is what makes learning visible within the desk budget.
    """
    base = {"lr": DESK_LR}
    base.update(overrides)
    return TrainConfig(**base)


def ablation_variant(config: TrainConfig, variant: str) -> TrainConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return replace(config, variant=variant)


def episode_seed(seed: int, episode: int, env: int = 0) -> int:
    return int(np.random.SeedSequence([seed, episode, env]).generate_state(1)[0])


# -- rollouts --------------------------------------------------------------------------

@dataclass
class Trajectory:
    obs: np.ndarray            # (T, N, 66)
    final_obs: np.ndarray      # (N, 66) observation after the last step
    history: np.ndarray        # (T, H, M, 4) history window seen at each step
    final_history: np.ndarray  # (H, M, 4)
    global_feature: np.ndarray  # (T, 4)
    final_global_feature: np.ndarray
    actions: np.ndarray        # (T, N)
    log_probs: np.ndarray      # (T, N)
    values: np.ndarray         # (T + 1, N), last row bootstraps the truncated episode
    terms: list                # T lists of N RewardTerms (post-action)
    local_rewards: np.ndarray  # (T, N)
    goal_rewards: np.ndarray   # (T,)
    rewards: np.ndarray        # (T, N) = local + goal
    goals: np.ndarray          # (T, 2) normalized targets generated at each step
    aggregates: list           # T GlobalAggregates observed after each step
    outcomes: np.ndarray       # (T, 2) normalized (W, Q) after each step
    metrics: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.obs.shape[0]


class Trainer:
    """Owns the networks, optimizers and normalizers for one training run."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.net = config.network()
        self.flow = config.flow()
        self.neighbors = neighbor_table(self.net)
        dtype = config.torch_dtype
        torch.manual_seed(episode_seed(config.seed, 0, 1 << 23))
        self.meta = MetaPolicy(self.net.regions.count, dtype=dtype)
        self.sub = SubPolicy(dropout=config.dropout, goal_dim=16 if config.goal_as_input else 0,
                             use_gac=config.variant != "no_gac",
                             use_global=config.variant not in ("no_global_feature", "no_meta"), dtype=dtype)
        if config.latent_aux:
            self.latent_probe = neural.Linear(56, self.net.regions.count * 4, dtype=dtype)
            sub_params = list(self.sub.parameters()) + list(self.latent_probe.parameters())
        else:
            self.latent_probe = None
            sub_params = list(self.sub.parameters())
        self.meta_opt = neural.Adam(self.meta.parameters(), lr=config.lr, max_grad_norm=config.max_grad_norm)
        self.sub_opt = neural.Adam(sub_params, lr=config.lr, max_grad_norm=config.max_grad_norm)
        self.value_norm = ValueNormalizer()
        self.generator = torch.Generator()
        self.sub.head.dropout.generator = self.generator
        self.episode = 0
        self.lr_halved = False
        self.rows: list[dict] = []
        self._safe_state = None

    # ---- helpers
    @property
    def weights(self) -> LossWeights:
        return self.config.weights

    def _t(self, x) -> torch.Tensor:
        return torch.as_tensor(np.asarray(x), dtype=self.config.torch_dtype)

    def _policy_step(self, obs, F_g, goal, greedy: bool):
        out = self.sub(self._t(obs), self.neighbors, F_g, goal)
        dist = torch.distributions.Categorical(logits=out.logits)
        if greedy:
            actions = out.logits.argmax(dim=-1)
        else:
            actions = _sample_categorical(out.logits, self.generator)
        return actions, dist.log_prob(actions), self.value_norm.denormalize(out.value.squeeze(-1))

    # ---- rollout
    @torch.no_grad()
    def collect(self, seed: int, greedy: bool = False) -> Trajectory:
        self.meta.eval()
        self.sub.eval()
        cfg = self.config
        state = new_state(self.net, self.flow, seed, cfg.horizon)
        featurizer = RegionalFeaturizer(self.net)
        history = RegionalHistory(self.net.regions.count, HISTORY_LEN)
        T = cfg.steps_per_episode
        obs_buf, hist_buf, fg_buf, act_buf, logp_buf, val_buf = [], [], [], [], [], []
        terms_buf, local_buf, agg_buf = [], [], []
        goal_needed = cfg.goal_as_input

        obs, stats = all_observations(state)
        history.push(featurizer.snapshot(stats))
        for t in range(T):
            hist = history.tensor()
            F_g = self.meta.global_feature(self._t(hist))
            goal = self.meta.subgoal_vector(self._t(hist)) if goal_needed else None
            actions, logp, value = self._policy_step(obs, F_g, goal, greedy)
            obs_buf.append(obs)
            hist_buf.append(hist)
            fg_buf.append(F_g.double().numpy())
            act_buf.append(actions.numpy())
            logp_buf.append(logp.double().numpy())
            val_buf.append(value.double().numpy())
            state.apply_actions(actions.tolist())
            obs, stats = all_observations(state)
            history.push(featurizer.snapshot(stats))
            terms = [reward_terms(st) for st in stats]
            terms_buf.append(terms)
            local_buf.append([local_reward(x) for x in terms])
            agg_buf.append(global_aggregates(stats))
        final_hist = history.tensor()
        F_g = self.meta.global_feature(self._t(final_hist))
        goal = self.meta.subgoal_vector(self._t(final_hist)) if goal_needed else None
        _, _, last_value = self._policy_step(obs, F_g, goal, True)
        val_buf.append(last_value.double().numpy())

        history_arr = np.stack(hist_buf)
        goals = self._goals(history_arr)
        raw = np.array([[a.W, a.Q] for a in agg_buf])
        scales = np.array([self.meta.w_scale.scale, self.meta.q_scale.scale])
        if not bool(self.meta.w_scale.initialized):
            scales = np.maximum(raw.mean(axis=0), 1.0)
        outcomes = raw / scales
        aggregates = [replace(a, W_norm=float(o[0]), Q_norm=float(o[1])) for a, o in zip(agg_buf, outcomes)]
        if cfg.uses_goal_reward:
            goal_rewards = np.array([goal_reward(o[0], o[1], g[0], g[1], self.weights, cfg.strict_paper_mode)
                                     for o, g in zip(outcomes, goals)])
        else:
            goal_rewards = np.zeros(T)
        local = np.array(local_buf)
        traj = Trajectory(
            obs=np.stack(obs_buf), final_obs=obs, history=history_arr, final_history=final_hist,
            global_feature=np.stack(fg_buf), final_global_feature=F_g.double().numpy(),
            actions=np.stack(act_buf), log_probs=np.stack(logp_buf), values=np.stack(val_buf),
            terms=terms_buf, local_rewards=local, goal_rewards=goal_rewards,
            rewards=local + goal_rewards[:, None], goals=goals, aggregates=aggregates, outcomes=outcomes,
        )
        traj.metrics = episode_metrics(state)
        traj.metrics["raw_aggregates"] = raw
        return traj

    @torch.no_grad()
    def _goals(self, history: np.ndarray, chunk: int = 120) -> np.ndarray:
        out = []
        for lo in range(0, len(history), chunk):
            out.append(self.meta.decode(self.meta.subgoal_vector(self._t(history[lo:lo + chunk]))).double().numpy())
        return np.concatenate(out)

    # ---- update
    def prepare_batch(self, trajs: list[Trajectory]) -> dict:
        """Tensors for the update; environments are stacked along the agent axis."""
        w = self.weights
        adv, ret = zip(*(gae(tr.rewards, tr.values, w.gamma, w.lam) for tr in trajs))
        ret_raw = np.concatenate(ret, axis=1)
        return {
            "trajs": trajs,
            "obs": self._t(np.concatenate([tr.obs for tr in trajs], axis=1)),
            "actions": torch.as_tensor(np.concatenate([tr.actions for tr in trajs], axis=1), dtype=torch.long),
            "old_logp": self._t(np.concatenate([tr.log_probs for tr in trajs], axis=1)),
            "adv": self._t(np.concatenate(adv, axis=1)),
            "ret_raw": ret_raw,
            "fg": [self._t(tr.global_feature) for tr in trajs],
            "hist": [self._t(tr.history) for tr in trajs],
            "outcomes": [self._t(tr.outcomes) for tr in trajs],
            "goals": [self._t(tr.goals) for tr in trajs],
        }

    def sub_minibatch_loss(self, batch: dict, idx: torch.Tensor) -> torch.Tensor:
        """sub_loss on the time indices `idx`; F_g comes from the rollout, so no gradient reaches the meta-policy."""
        cfg, w = self.config, self.weights
        N = self.net.num_intersections
        logits, values, latents = [], [], []
        for e in range(len(batch["trajs"])):
            goal_in = None
            if cfg.goal_as_input:
                with torch.no_grad():
                    goal_in = self.meta.subgoal_vector(batch["hist"][e][idx])
            out = self.sub(batch["obs"][idx][:, e * N:(e + 1) * N], self.neighbors, batch["fg"][e][idx], goal_in)
            logits.append(out.logits)
            values.append(out.value.squeeze(-1))
            latents.append(out.latent_plan)
        logits = torch.cat(logits, dim=1)
        values = torch.cat(values, dim=1)
        ac = ppo_loss(logits.reshape(-1, logits.shape[-1]), values.reshape(-1), batch["actions"][idx].reshape(-1),
                      batch["old_logp"][idx].reshape(-1), batch["adv"][idx].reshape(-1),
                      batch["ret"][idx].reshape(-1), w)
        ls = sub_loss(ac, torch.cat([o[idx] for o in batch["outcomes"]]), torch.cat([g[idx] for g in batch["goals"]]),
                      w, cfg.strict_paper_mode)
        if self.latent_probe is not None:
            ls = ls + self._latent_aux(latents, batch["trajs"], idx)
        return ls

    def meta_minibatch_loss(self, batch: dict, idx: torch.Tensor) -> torch.Tensor:
        pred = torch.cat([self.meta.decode(self.meta.subgoal_vector(h[idx])) for h in batch["hist"]])
        return meta_loss(pred, torch.cat([o[idx] for o in batch["outcomes"]]), self.weights,
                         self.config.strict_paper_mode)

    def update(self, trajs: list[Trajectory]) -> dict:
        cfg = self.config
        self.meta.train()
        self.sub.train()
        T = trajs[0].length
        batch = self.prepare_batch(trajs)
        self.value_norm.update(batch["ret_raw"])
        batch["ret"] = self._t(self.value_norm.normalize(batch["ret_raw"]))
        meta_losses, sub_losses, grad_norms = [], [], []
        train_meta = cfg.variant != "no_meta"
        mb = min(cfg.minibatch_steps, T)
        for _ in range(cfg.epochs):
            perm = torch.randperm(T, generator=self.generator)
            for lo in range(0, T, mb):
                idx = perm[lo:lo + mb]
                self.sub_opt.zero_grad()
                ls = self.sub_minibatch_loss(batch, idx)
                if not torch.isfinite(ls):
                    raise FloatingPointError("non-finite sub-policy loss")
                ls.backward()
                self.sub_opt.step()
                sub_losses.append(float(ls.detach()))
                grad_norms.append(self.sub_opt.last_grad_norm)
                if train_meta:
                    self.meta_opt.zero_grad()
                    lm = self.meta_minibatch_loss(batch, idx)
                    if not torch.isfinite(lm):
                        raise FloatingPointError("non-finite meta-policy loss")
                    lm.backward()
                    self.meta_opt.step()
                    meta_losses.append(float(lm.detach()))
        if train_meta:
            for tr in trajs:
                for W, Q in tr.metrics["raw_aggregates"]:
                    self.meta.w_scale.update(W)
                    self.meta.q_scale.update(Q)
        return {
            "meta_loss": float(np.mean(meta_losses)) if meta_losses else 0.0,
            "sub_loss": float(np.mean(sub_losses)),
            "grad_norm": float(np.mean(grad_norms)),
        }

    def _latent_aux(self, latents, trajs, idx):
        """Optional regression of the latent plan toward the next regional snapshot."""
        loss = 0.0
        for lat, tr in zip(latents, trajs):
            nxt = np.concatenate([tr.history[1:, -1], tr.final_history[-1][None]])
            target = self._t(nxt.reshape(len(nxt), -1))[idx]
            pred = self.latent_probe(lat).mean(dim=1)
            loss = loss + ((pred - target) ** 2).mean()
        return loss

    # ---- episodes
    def run_episode(self) -> dict:
        cfg = self.config
        ep = self.episode
        self.generator.manual_seed(episode_seed(cfg.seed, ep, 1 << 20))
        trajs = [self.collect(episode_seed(cfg.seed, ep, e)) for e in range(cfg.parallel_envs)]
        stats = self.update(trajs)
        row = {
            "episode": ep, "seed": cfg.seed, "variant": cfg.variant,
            "mean_reward": float(np.mean([tr.rewards.mean() for tr in trajs])),
            "mean_local_reward": float(np.mean([tr.local_rewards.mean() for tr in trajs])),
            "ATT": float(np.mean([tr.metrics["ATT"] for tr in trajs])),
            "ADT": float(np.mean([tr.metrics["ADT"] for tr in trajs])),
            **stats,
        }
        self.episode += 1
        self.rows.append(row)
        return row

    def train(self, episodes: int | None = None, out_dir: str | Path | None = None,
              log_path: str | Path | None = None) -> list[dict]:
        cfg = self.config
        episodes = cfg.episodes if episodes is None else episodes
        if cfg.pretrain_episodes and self.episode == 0 and self.meta_opt.step_count == 0:
            pretrain_meta(self, cfg.pretrain_episodes, cfg.pretrain_steps)
        out_dir = Path(out_dir) if out_dir else None
        self._safe_state = self.state_dict()
        target = self.episode + episodes
        failures = 0
        while self.episode < target:
            try:
                row = self.run_episode()
            except FloatingPointError as exc:
                failures += 1
                if failures > 1 or self.lr_halved:
                    raise TrainingDiverged(f"episode {self.episode}: {exc}; aborting after rollback") from exc
                log.warning("episode %d: %s; rolling back and halving the learning rate", self.episode, exc)
                self.load_state_dict(self._safe_state)
                self.meta_opt.lr /= 2
                self.sub_opt.lr /= 2
                self.lr_halved = True
                continue
            log.info("episode %d reward %.4f ATT %.1f ADT %.1f", row["episode"], row["mean_reward"],
                     row["ATT"], row["ADT"])
            if log_path:
                append_log(log_path, [row])
            if cfg.checkpoint_every and self.episode % cfg.checkpoint_every == 0:
                self._safe_state = self.state_dict()
                if out_dir:
                    self.save(out_dir / f"checkpoint_ep{self.episode:05d}.ckpt")
        if out_dir:
            self.save(out_dir / "final.ckpt")
        return self.rows

    # ---- evaluation
    def evaluate(self, seeds: Sequence[int], flow: FlowSpec | None = None) -> list[dict]:
        results = []
        saved_flow = self.flow
        if flow is not None:
            self.flow = flow
        try:
            for s in seeds:
                tr = self.collect(int(s), greedy=True)
                results.append({"seed": int(s), "ATT": tr.metrics["ATT"], "ADT": tr.metrics["ADT"],
                                "throughput": tr.metrics["throughput"], "mean_reward": float(tr.rewards.mean())})
        finally:
            self.flow = saved_flow
        return results

    # ---- state
    def state_dict(self) -> dict:
        return {
            "meta": copy.deepcopy(self.meta.state_dict()),
            "sub": copy.deepcopy(self.sub.state_dict()),
            "vnorm": copy.deepcopy(self.value_norm.state_dict()),
            "probe": copy.deepcopy(self.latent_probe.state_dict()) if self.latent_probe else None,
            "meta_opt": self.meta_opt.state(), "sub_opt": self.sub_opt.state(),
            "episode": self.episode, "lr_halved": self.lr_halved, "rows": list(self.rows),
            "generator": self.generator.get_state().clone(),
        }

    def load_state_dict(self, st: dict) -> None:
        self.meta.load_state_dict(st["meta"])
        self.sub.load_state_dict(st["sub"])
        self.value_norm.load_state_dict(st["vnorm"])
        if self.latent_probe is not None and st.get("probe") is not None:
            self.latent_probe.load_state_dict(st["probe"])
        self.meta_opt.load_state(st["meta_opt"])
        self.sub_opt.load_state(st["sub_opt"])
        self.episode = st["episode"]
        self.lr_halved = st["lr_halved"]
        self.rows = list(st["rows"])
        self.generator.set_state(st["generator"])

    def save(self, path: str | Path) -> None:
        tensors = {}
        modules = {"meta": self.meta, "sub": self.sub, "vnorm": self.value_norm}
        if self.latent_probe is not None:
            modules["probe"] = self.latent_probe
        for prefix, mod in modules.items():
            for name, value in mod.state_dict().items():
                tensors[f"{prefix}/{name}"] = value
        for prefix, opt in (("meta_opt", self.meta_opt), ("sub_opt", self.sub_opt)):
            for k, (m, v) in enumerate(zip(opt.m, opt.v)):
                tensors[f"{prefix}/m/{k}"] = m
                tensors[f"{prefix}/v/{k}"] = v
        tensors["rng/generator"] = self.generator.get_state().numpy().astype(np.float64)
        meta = {
            "kind": "trainer", "config": self.config.to_dict(), "episode": self.episode,
            "lr_halved": self.lr_halved,
            "optimizers": {p: {"step": o.step_count, "rejected": o.rejected, "lr": o.lr}
                           for p, o in (("meta_opt", self.meta_opt), ("sub_opt", self.sub_opt))},
            "normalizers": {"w_scale": self.meta.w_scale.scale, "q_scale": self.meta.q_scale.scale},
        }
        neural.save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path: str | Path, config: TrainConfig | None = None) -> "Trainer":
        tensors, meta = neural.load_checkpoint(path)
        if meta.get("kind") != "trainer":
            raise neural.CheckpointError(f"{path} is not a trainer checkpoint")
        stored = TrainConfig.from_dict(meta["config"])
        if config is not None:
            for key in ("rows", "cols", "region_rows", "region_cols", "goal_as_input", "latent_aux"):
                if getattr(config, key) != getattr(stored, key):
                    raise neural.CheckpointError(f"checkpoint {key}={getattr(stored, key)} does not match "
                                                 f"requested {getattr(config, key)}")
        trainer = cls(config or stored)
        modules = {"meta": trainer.meta, "sub": trainer.sub, "vnorm": trainer.value_norm}
        if trainer.latent_probe is not None:
            modules["probe"] = trainer.latent_probe
        for prefix, mod in modules.items():
            sd = mod.state_dict()
            for name in sd:
                sd[name] = torch.as_tensor(tensors[f"{prefix}/{name}"], dtype=sd[name].dtype)
            mod.load_state_dict(sd)
        for prefix, opt in (("meta_opt", trainer.meta_opt), ("sub_opt", trainer.sub_opt)):
            info = meta["optimizers"][prefix]
            opt.load_state({
                "step": info["step"], "rejected": info["rejected"], "lr": info["lr"],
                "m": [torch.as_tensor(tensors[f"{prefix}/m/{k}"]) for k in range(len(opt.m))],
                "v": [torch.as_tensor(tensors[f"{prefix}/v/{k}"]) for k in range(len(opt.v))],
            })
        trainer.generator.set_state(torch.as_tensor(tensors["rng/generator"].astype(np.uint8)))
        trainer.episode = int(meta["episode"])
        trainer.lr_halved = bool(meta["lr_halved"])
        return trainer


def _sample_categorical(logits: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    probs = torch.softmax(logits.double(), dim=-1)
    return torch.multinomial(probs.reshape(-1, probs.shape[-1]), 1, generator=generator).reshape(probs.shape[:-1])


# -- pretraining -------------------------------------------------------------------------

def collect_meta_dataset(trainer: Trainer, episodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Histories and next-step raw (W, Q) under MaxPressure control."""
    net, cfg = trainer.net, trainer.config
    hists, targets = [], []
    for ep in range(episodes):
        state = new_state(net, trainer.flow, episode_seed(cfg.seed, ep, 1 << 21), cfg.horizon)
        featurizer = RegionalFeaturizer(net)
        history = RegionalHistory(net.regions.count)
        _, stats = all_observations(state)
        history.push(featurizer.snapshot(stats))
        while not state.done:
            hists.append(history.tensor())
            state.apply_actions(max_pressure_controller(state))
            _, stats = all_observations(state)
            history.push(featurizer.snapshot(stats))
            agg = global_aggregates(stats)
            targets.append((agg.W, agg.Q))
    return np.stack(hists), np.array(targets)


def pretrain_meta(trainer: Trainer, episodes: int, steps: int, batch: int = 60) -> list[float]:
    """Fit the goal decoder to MaxPressure outcomes before joint training."""
    hists, raw = collect_meta_dataset(trainer, episodes)
    for W, Q in raw:
        trainer.meta.w_scale.update(W)
        trainer.meta.q_scale.update(Q)
    scale = np.array([trainer.meta.w_scale.scale, trainer.meta.q_scale.scale])
    target = trainer._t(raw / scale)
    H = trainer._t(hists)
    rng = np.random.default_rng(episode_seed(trainer.config.seed, 0, 1 << 22))
    losses = []
    trainer.meta.train()
    for _ in range(steps):
        idx = torch.as_tensor(rng.choice(len(H), size=min(batch, len(H)), replace=False))
        losses.append(pretrain_meta_step(trainer.meta, trainer.meta_opt, H[idx], target[idx]))
    return losses


# -- entry points ----------------------------------------------------------------------

def append_log(path: str | Path, rows: Sequence[dict]) -> None:
    path = Path(path)
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def joint_train(config: TrainConfig, out_dir: str | Path | None = None) -> tuple[Trainer, list[dict]]:
    trainer = Trainer(config)
    log_path = Path(out_dir) / "train_log.csv" if out_dir else None
    rows = trainer.train(config.episodes, out_dir=out_dir, log_path=log_path)
    return trainer, rows


def episodes_for_budget(divisor: int = 1, steps_per_episode: int = EPISODE_SECONDS // CONTROL_STEP) -> int:
    """Episodes covering the published step budget divided by `divisor`."""
    return max(1, math.ceil(PAPER_TOTAL_STEPS / max(divisor, 1) / steps_per_episode))


__all__ = [
    "LossWeights", "RewardTerms", "GlobalAggregates", "Trajectory", "TrainConfig", "Trainer",
    "reward_terms", "local_reward", "goal_reward", "global_aggregates", "gae", "ppo_loss", "meta_loss",
    "sub_loss", "ablation_variant", "joint_train", "pretrain_meta", "episodes_for_budget", "VARIANTS",
    "LOG_COLUMNS", "desk_config", "DESK_LR", "episode_seed",
]
