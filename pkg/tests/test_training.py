import math

import numpy as np
import pytest
import torch

from hiertsc.training import (LOG_COLUMNS, LossWeights, RewardTerms, TrainConfig, Trainer, TrainingDiverged,
                              ValueNormalizer, ablation_variant, alignment_gap, episodes_for_budget, gae,
                              goal_reward, joint_train, local_reward, meta_loss, ppo_loss, sub_loss)

DT = torch.float64
W = LossWeights()


def brute_force_gae(r, v, gamma, lam):
    T = len(r)
    return np.array([sum((gamma * lam) ** l * (r[t + l] + gamma * v[t + l + 1] - v[t + l]) for l in range(T - t))
                     for t in range(T)])


# -- rewards ----------------------------------------------------------------------------

def test_local_reward_examples():
    assert local_reward(RewardTerms(0, 0, 0, 0, 0)) == 0
    assert local_reward(RewardTerms(0, 0, 0, 0, 1)) == 1
    assert local_reward(RewardTerms(0.2, 0.1, 0.1, 0.3, 0.5)) == pytest.approx(-0.2, rel=1e-12)


def test_goal_reward_examples():
    assert goal_reward(0.7, 0.3, 0.7, 0.3, W) == 0
    assert goal_reward(1.2, 1.4, 1.0, 1.0, W) == pytest.approx(-0.3, rel=1e-12)
    assert goal_reward(0.5, 0.5, 1.0, 1.0, W) > 0


def test_goal_reward_strict_pairing():
    w = LossWeights(beta_q=0.25, beta_w=0.75)
    assert goal_reward(1.0, 2.0, 0.5, 0.0, w) == pytest.approx(-(0.75 * 0.5 + 0.25 * 2.0))
    assert goal_reward(1.0, 2.0, 0.5, 0.0, w, strict_paper=True) == pytest.approx(-(0.25 * 1.0 + 0.75 * 1.5))


# -- GAE --------------------------------------------------------------------------------

def test_gae_single_step():
    adv, ret = gae([2.5], [0.0, 0.0])
    assert adv.tolist() == [2.5] and ret.tolist() == [2.5]


def test_gae_lambda_zero_is_td():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=6), rng.normal(size=7)
    adv, _ = gae(r, v, 0.9, 0.0)
    assert np.allclose(adv, r + 0.9 * v[1:] - v[:-1], atol=1e-15)


def test_gae_three_step_oracle():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=3), rng.normal(size=4)
    adv, ret = gae(r, v, 0.99, 0.95)
    assert np.max(np.abs(adv - brute_force_gae(r, v, 0.99, 0.95))) <= 1e-12
    assert np.allclose(ret, adv + v[:-1], atol=1e-15)


def test_gae_multi_agent_columns():
    rng = np.random.default_rng(2)
    r, v = rng.normal(size=(5, 3)), rng.normal(size=(6, 3))
    adv, _ = gae(r, v)
    for k in range(3):
        assert np.max(np.abs(adv[:, k] - brute_force_gae(r[:, k], v[:, k], 0.99, 0.95))) <= 1e-12


def test_gae_length_mismatch():
    with pytest.raises(ValueError):
        gae([1.0, 2.0], [0.0, 0.0])


# -- losses -----------------------------------------------------------------------------

def test_ppo_ratio_one_gives_negative_mean_advantage():
    logits = torch.randn(6, 8, dtype=DT)
    actions = torch.arange(6) % 8
    old = torch.log_softmax(logits, -1).gather(-1, actions[:, None])[:, 0]
    adv = torch.tensor([1.0, -2.0, 0.5, 3.0, 0.0, 1.5], dtype=DT)
    ac = ppo_loss(logits, torch.zeros(6, dtype=DT), actions, old, adv, torch.zeros(6, dtype=DT), W, normalize=False)
    assert ac.policy.item() == pytest.approx(-adv.mean().item(), rel=1e-12)


def test_ppo_clipping():
    logits = torch.zeros(1, 8, dtype=DT)
    actions = torch.tensor([0])
    old = torch.tensor([math.log(0.125 / 1.5)], dtype=DT)     # ratio 1.5
    ac = ppo_loss(logits, torch.zeros(1, dtype=DT), actions, old, torch.tensor([2.0], dtype=DT),
                  torch.zeros(1, dtype=DT), W, normalize=False)
    assert ac.policy.item() == pytest.approx(-1.2 * 2.0, rel=1e-12)


def test_ppo_entropy_and_value():
    logits = torch.zeros(4, 8, dtype=DT)
    ac = ppo_loss(logits, torch.ones(4, dtype=DT), torch.zeros(4, dtype=torch.long),
                  torch.full((4,), math.log(0.125), dtype=DT), torch.zeros(4, dtype=DT),
                  torch.full((4,), 3.0, dtype=DT), W, normalize=False)
    assert ac.entropy.item() == pytest.approx(math.log(8), rel=1e-12)
    assert ac.value.item() == pytest.approx(4.0)
    assert ac.total.item() == pytest.approx(ac.policy.item() - 0.01 * math.log(8) + 4.0)


def test_meta_loss_examples():
    o = torch.tensor([[0.4, 0.9]], dtype=DT)
    assert meta_loss(o.clone(), o, W).item() == 0
    w0 = LossWeights(eta1=0.0)
    assert meta_loss(torch.zeros(1, 2, dtype=DT), torch.ones(1, 2, dtype=DT), w0).item() == 2.0


def test_meta_loss_rewards_ambition():
    o = torch.tensor([[1.0, 1.0]], dtype=DT)
    thetas = np.linspace(math.pi / 4, math.pi / 4 + math.pi, 9)     # from above the outcome to below it
    losses = [meta_loss(o + 0.3 * torch.tensor([[math.cos(t), math.sin(t)]], dtype=DT), o, W).item()
              for t in thetas]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_sub_loss_consistency():
    logits = torch.randn(3, 8, dtype=DT)
    ac = ppo_loss(logits, torch.zeros(3, dtype=DT), torch.zeros(3, dtype=torch.long),
                  torch.full((3,), -2.0, dtype=DT), torch.randn(3, dtype=DT), torch.zeros(3, dtype=DT), W)
    out = torch.tensor([[0.8, 1.1]], dtype=DT)
    goal = torch.tensor([[0.5, 0.5]], dtype=DT)
    assert sub_loss(ac, out, goal, LossWeights(eta2=0.0)).item() == ac.total.item()
    assert sub_loss(ac, goal, goal, W).item() == ac.total.item()
    above = sub_loss(ac, out, goal, W).item() - ac.total.item()
    below = sub_loss(ac, goal - 0.2, goal, W).item() - ac.total.item()
    assert above > 0 > below


def test_alignment_gap_is_negative_goal_reward():
    out, goal = torch.tensor([0.9, 0.2], dtype=DT), torch.tensor([0.4, 0.6], dtype=DT)
    assert alignment_gap(out, goal, W).item() == pytest.approx(-goal_reward(0.9, 0.2, 0.4, 0.6, W))


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(gamma=1.5)


def test_value_normalizer_round_trip():
    vn = ValueNormalizer()
    assert vn.stats() == (0.0, 1.0)
    vn.update(np.array([-30.0, -32.0, -28.0]))
    x = np.array([-31.0, -29.0])
    assert np.allclose(vn.denormalize(vn.normalize(x)), x, atol=1e-12)
    assert vn.stats()[0] == pytest.approx(-30.0)


# -- configuration ----------------------------------------------------------------------

def test_variant_weights():
    assert TrainConfig(variant="no_meta").weights.eta1 == 0
    assert not TrainConfig(variant="no_subgoal").uses_goal_reward
    assert ablation_variant(TrainConfig(), "no_gac").variant == "no_gac"
    with pytest.raises(ValueError):
        TrainConfig(variant="bogus")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nonsense": 1})
    assert TrainConfig.from_dict(TrainConfig(seed=4).to_dict()) == TrainConfig(seed=4)


def test_episodes_for_budget():
    assert episodes_for_budget() == math.ceil(380000 / 240)
    assert episodes_for_budget(10) == math.ceil(38000 / 240)


# -- trainer ----------------------------------------------------------------------------

def small(**kw):
    base = dict(horizon=150, seed=3, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_no_meta_fusion_and_reward():
    tr = Trainer(small(variant="no_meta"))
    traj = tr.collect(0)
    X = tr.sub.fused_input(tr._t(traj.obs[0]), tr.neighbors, tr._t(traj.global_feature[0]))
    assert torch.all(X[:, -4:] == 0)
    assert np.array_equal(traj.rewards, traj.local_rewards)


def test_gradient_isolation_with_zero_adversarial_weights():
    tr = Trainer(small(eta1=0.0, eta2=0.0, dtype="float64"))
    traj = tr.collect(0)
    batch = tr.prepare_batch([traj])
    batch["ret"] = tr._t(batch["ret_raw"])
    idx = torch.arange(traj.length)
    for p in list(tr.meta.parameters()) + list(tr.sub.parameters()):
        p.grad = None
    tr.sub_minibatch_loss(batch, idx).backward()
    cross = [float(p.grad.abs().max()) for p in tr.meta.parameters() if p.grad is not None]
    assert max(cross, default=0.0) < 1e-12
    assert any(p.grad is not None for p in tr.sub.parameters())
    for p in tr.sub.parameters():
        p.grad = None
    tr.meta_minibatch_loss(batch, idx).backward()
    cross = [float(p.grad.abs().max()) for p in tr.sub.parameters() if p.grad is not None]
    assert max(cross, default=0.0) < 1e-12


def test_smoke_run_writes_logs_and_checkpoint(tmp_path):
    cfg = TrainConfig(episodes=2, horizon=300)
    trainer, rows = joint_train(cfg, tmp_path)
    lines = (tmp_path / "train_log.csv").read_text().strip().splitlines()
    assert lines[0].split(",") == list(LOG_COLUMNS) and len(lines) == 3
    assert len(list(tmp_path.glob("*.ckpt"))) == 1
    assert all(np.isfinite([r["ATT"], r["ADT"], r["mean_reward"]]).all() for r in rows)


def test_seeded_runs_identical():
    a = Trainer(small()).train(5)
    b = Trainer(small()).train(5)
    assert a == b


def test_checkpoint_continue_is_bit_identical(tmp_path):
    ref = Trainer(small())
    ref.train(2)
    ref.save(tmp_path / "mid.ckpt")
    expected = ref.run_episode()
    resumed = Trainer.load(tmp_path / "mid.ckpt")
    got = resumed.run_episode()
    assert got == expected


def test_checkpoint_mismatch_rejected(tmp_path):
    from hiertsc.neural import CheckpointError
    tr = Trainer(small())
    tr.save(tmp_path / "a.ckpt")
    with pytest.raises(CheckpointError):
        Trainer.load(tmp_path / "a.ckpt", small(rows=3, cols=3))


def test_evaluate_is_greedy_and_deterministic():
    tr = Trainer(small())
    a, b = tr.evaluate([7, 8]), tr.evaluate([7, 8])
    assert a == b and all(math.isfinite(r["ATT"]) for r in a)


def test_divergence_rolls_back_then_aborts(monkeypatch):
    tr = Trainer(small())
    calls = {"n": 0}
    original = tr.update

    def flaky(trajs):
        calls["n"] += 1
        if calls["n"] == 2:
            raise FloatingPointError("boom")
        return original(trajs)

    monkeypatch.setattr(tr, "update", flaky)
    tr.train(3)
    assert tr.lr_halved and tr.sub_opt.lr == pytest.approx(5e-4) and tr.episode == 3

    def always(trajs):
        raise FloatingPointError("boom")

    monkeypatch.setattr(tr, "update", always)
    with pytest.raises(TrainingDiverged):
        tr.train(1)


def test_reward_decomposition_exact():
    from hiertsc.training import local_reward, goal_reward
    tr = Trainer(small())
    traj = tr.collect(1)
    w = tr.weights
    for t in range(traj.length):
        g = goal_reward(traj.outcomes[t, 0], traj.outcomes[t, 1], traj.goals[t, 0], traj.goals[t, 1], w)
        for i, terms in enumerate(traj.terms[t]):
            assert traj.rewards[t, i] == local_reward(terms) + g


def test_advantage_normalization_moments():
    from hiertsc.training import normalize_advantages
    a = normalize_advantages(torch.randn(480, dtype=DT) * 7 + 3)
    assert abs(a.mean().item()) < 1e-6 and abs(a.std(unbiased=False).item() - 1) < 1e-6


def test_gae_on_stored_rollout_segments():
    tr = Trainer(small())
    traj = tr.collect(2)
    r, v = traj.rewards, traj.values
    for L in range(1, 6):
        for a in range(0, traj.length - L + 1):
            adv, _ = gae(r[a:a + L], v[a:a + L + 1])
            for k in range(r.shape[1]):
                ref = brute_force_gae(r[a:a + L, k], v[a:a + L + 1, k], 0.99, 0.95)
                assert np.max(np.abs(adv[:, k] - ref)) <= 1e-10
