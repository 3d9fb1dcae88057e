import dataclasses

import numpy as np
import pytest

from varlab.oracle import optimal_policy
from varlab.policy import TabularPolicy, init_from_reference
from varlab.reward import RewardTable, sample_preferences, synth_rewards
from varlab.space import make_space
from varlab.trainer import Adam, TrainConfig, TrainingError, evaluate, read_report, train


def test_config_validation():
    with pytest.raises(ValueError, match="batch_size"):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError, match="loss_kind"):
        TrainConfig(loss_kind="ppo")
    with pytest.raises(ValueError, match="clip_epsilon"):
        TrainConfig(clip_epsilon=1.0)


def test_var_exact_converges():
    space = make_space(3, 8, "random-dirichlet", seed=7)
    rewards = synth_rewards(space, "iid-gaussian", sigma=1.0, seed=7)
    cfg = TrainConfig(loss_kind="var-exact", optimizer="adam", lr=0.1, steps=2000, sampling="enumerate")
    rep = train(space, rewards, cfg)
    assert rep.final["kl_forward"] < 1e-4
    assert rep.final["step"] == 2000
    assert rep.records[0]["step"] == 0


def test_constant_rewards_fixed_point():
    space = make_space(3, 8, "random-dirichlet", seed=7)
    rewards = RewardTable(np.full(space.shape, 0.5))
    cfg = TrainConfig(loss_kind="var-exact", steps=500, sampling="enumerate", eval_every=1)
    rep = train(space, rewards, cfg)
    kls = rep.series("kl_forward")
    assert kls[0] < 1e-12
    assert kls.max() < 1e-6


def test_negative_weight_diverges():
    space = make_space(1, 3)
    weights = np.array([[-1.0, 1.0, 1.0]])
    cfg = TrainConfig(loss_kind="wsft-custom", optimizer="gd", lr=100.0, steps=5000, sampling="enumerate",
                      eval_every=10, allow_divergence=True)
    rep = train(space, RewardTable(np.zeros((1, 3))), cfg, weights=weights)
    assert rep.series("loss").min() < -1e4


def test_divergence_cap_stops():
    space = make_space(1, 3)
    cfg = TrainConfig(loss_kind="wsft-custom", optimizer="gd", lr=1e4, steps=100_000, sampling="enumerate",
                      eval_every=1000, allow_divergence=True)
    rep = train(space, RewardTable([[-1.0, 1.0, 1.0]]), cfg)
    assert rep.diverged and rep.stop_reason == "divergence-cap"
    assert rep.final["loss"] <= -1e6
    assert rep.final["step"] < 100_000


def test_non_finite_raises_without_flag():
    space = make_space(1, 2)
    cfg = TrainConfig(loss_kind="wsft-custom", optimizer="gd", lr=1e307, steps=50, sampling="enumerate",
                      divergence_cap=-np.inf)
    with pytest.raises(TrainingError, match="non-finite") as info:
        train(space, RewardTable([[-1.0, 1.0]]), cfg)
    assert info.value.report.diverged


def test_evaluate_at_optimum(instance):
    space, rewards = instance
    m = evaluate(space, rewards, TabularPolicy(np.log(optimal_policy(space, rewards).probs)))
    assert m["kl_forward"] < 1e-10 and m["kl_reverse"] < 1e-10
    assert abs(m["J_gap"]) < 1e-10


def test_evaluate_reference_gap(instance, rng):
    space, rewards = instance
    assert evaluate(space, rewards, init_from_reference(space))["J_gap"] > 0
    for _ in range(50):
        pol = TabularPolicy(rng.normal(size=space.shape) * 3)
        assert evaluate(space, rewards, pol)["J_gap"] >= 0


def test_determinism(instance):
    space, rewards = instance
    cfg = TrainConfig(loss_kind="var-inbatch", steps=300, batch_size=4, seed=42, eval_every=10)
    a = train(space, rewards, cfg)
    b = train(space, rewards, cfg)
    assert a.metric_rows() == b.metric_rows()
    assert a.policy.logits.tobytes() == b.policy.logits.tobytes()
    c = train(space, rewards, dataclasses.replace(cfg, seed=43))
    assert a.metric_rows() != c.metric_rows()


def test_monotone_full_batch_gd(instance):
    space, rewards = instance
    cfg = TrainConfig(loss_kind="var-exact", optimizer="gd", lr=1.0, steps=500, sampling="enumerate", eval_every=1)
    loss = train(space, rewards, cfg).series("loss")
    assert np.all(np.diff(loss) <= 1e-12)
    assert loss[-1] < loss[0]


def test_inbatch_matches_exact_on_enumeration():
    space = make_space(1, 6, "random-dirichlet", seed=5)
    rewards = synth_rewards(space, seed=5)
    base = TrainConfig(steps=300, sampling="enumerate", eval_every=1)
    a = train(space, rewards, dataclasses.replace(base, loss_kind="var-inbatch"))
    b = train(space, rewards, dataclasses.replace(base, loss_kind="var-exact"))
    for name in ("loss", "kl_forward", "J"):
        assert np.max(np.abs(a.series(name) - b.series(name))) < 1e-10
    assert np.max(np.abs(a.policy.logits - b.policy.logits)) < 1e-10


def test_dpo_training_moves_towards_preferences():
    space = make_space(2, 4, "random-dirichlet", seed=0)
    rewards = synth_rewards(space, "planted-best", gap=3.0, seed=0)
    triples = sample_preferences(space, rewards, 400, seed=0)
    cfg = TrainConfig(loss_kind="dpo", steps=300, batch_size=32, lr=0.05)
    rep = train(space, rewards, cfg, triples=triples)
    assert rep.final["loss"] < rep.records[0]["loss"]
    assert rep.records[0]["loss"] == pytest.approx(np.log(2.0), abs=1e-12)
    best = np.argmax(rewards.values, axis=1)
    probs = rep.policy.probs()
    assert np.all(probs[np.arange(2), best] > space.ref_policy[np.arange(2), best])


def test_dpo_needs_triples(instance):
    space, rewards = instance
    with pytest.raises(ValueError):
        train(space, rewards, TrainConfig(loss_kind="dpo", steps=1))


def test_converge_kl_early_stop(instance):
    space, rewards = instance
    cfg = TrainConfig(loss_kind="var-exact", sampling="enumerate", steps=5000, eval_every=10, converge_kl=1e-3)
    rep = train(space, rewards, cfg)
    assert rep.converged and rep.stop_reason == "converged"
    assert rep.final["kl_forward"] < 1e-3
    assert rep.final["step"] < 5000


def test_adam_first_step_is_lr_sign():
    opt = Adam(0.1)
    params = np.zeros(3)
    opt.step(params, np.array([2.0, -0.5, 0.0]))
    np.testing.assert_allclose(params, [-0.1, 0.1, 0.0], atol=1e-8)


def test_report_round_trip(tmp_path, instance):
    space, rewards = instance
    rep = train(space, rewards, TrainConfig(steps=50, eval_every=10))
    p = tmp_path / "run.records"
    rep.write(p)
    records, summary = read_report(p)
    assert [r["step"] for r in records] == [0, 10, 20, 30, 40, 50]
    assert summary["final"]["kl_forward"] == rep.final["kl_forward"]
    assert summary["config"]["steps"] == 50


def test_initial_policy_not_mutated(instance):
    space, rewards = instance
    start = TabularPolicy(np.zeros(space.shape))
    before = start.logits.copy()
    train(space, rewards, TrainConfig(steps=10), policy=start)
    assert np.array_equal(start.logits, before)
