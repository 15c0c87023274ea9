import numpy as np
import pytest

from beliefkit import autodiff as ad
from beliefkit.agent import (
    TrainConfig, a2c_update, build_agent, evaluate_agent, greedy_choice, n_step_returns, train,
    write_metrics,
)
from beliefkit.pomdp import PolicyError
from beliefkit.rollout import VecEnv, collect, encode_histories, evaluate


def test_n_step_returns():
    rewards = np.array([[1.0], [2.0], [3.0]])
    ends = np.array([[0.0], [1.0], [0.0]])
    out = n_step_returns(rewards, ends, np.array([10.0]), 0.5)
    np.testing.assert_allclose(out[:, 0], [1 + 0.5 * 2, 2.0, 3 + 0.5 * 10])


def test_greedy_choice_ties():
    assert list(greedy_choice(np.array([[0.4, 0.4, 0.2], [0.1, 0.2, 0.7]]))) == [0, 2]


def test_vecenv_workers_are_independent(tiger):
    a = VecEnv(tiger, 3, seed=10)
    b = VecEnv(tiger, 1, seed=11)
    for _ in range(20):
        ra = a.step(np.array([1, 1, 1]))
        rb = b.step(np.array([1]))
        assert ra[4][1] == rb[4][0]


def test_vecenv_truncates(tiger):
    env = VecEnv(tiger, 2, seed=0, max_episode_steps=3)
    listen = np.array([1, 1])
    for _ in range(2):
        env.step(listen)
    *_, done, trunc = env.step(listen)
    assert np.all(done | trunc)
    assert np.all(env.at_root)


def test_collect_shapes_and_memory(tiger):
    refined, m, enc, ac = build_agent(tiger, seed=0, d_sub=8, hidden=8)
    env = VecEnv(tiger, 4, seed=0)
    batch = collect(env, enc, refined, m, lambda mem, root: ac.probs(mem), 5, flat=False)
    assert batch.actions.shape == (5, 4)
    assert batch.memory.shape == (5, 4, 8)
    np.testing.assert_allclose(encode_histories(enc, env.histories), batch.final_memory, atol=1e-12)
    flat = batch.flat()
    assert flat.size == 20 and flat.memory.shape == (20, 8)


def test_stale_batch_rejected(tiger):
    refined, m, enc, ac = build_agent(tiger, seed=0, d_sub=8, hidden=8)
    env = VecEnv(tiger, 4, seed=0)
    cfg = TrainConfig()
    opt = ad.Optimizer(ac.params)
    batch = collect(env, enc, refined, m, lambda mem, root: ac.probs(mem), 4, version=ac.version,
                    flat=False)
    a2c_update(ac, batch, cfg, opt, tiger.gamma)
    with pytest.raises(PolicyError):
        a2c_update(ac, batch, cfg, opt, tiger.gamma)


def test_evaluate_returns_are_episode_sums(rp214):
    refined, m, enc, ac = build_agent(rp214, seed=0, d_sub=8, hidden=8)
    returns = evaluate(rp214, enc, lambda mem, root: np.full((len(mem), 2), 0.5), 50, None, 0)
    assert np.all(np.isfinite(returns))
    scored = 4 - 1
    assert np.all(np.abs(returns) <= 1.0 + 1e-12)
    assert np.allclose(returns * scored, np.round(returns * scored))


def test_short_training_run(tiger, tmp_path):
    refined, m, enc, ac = build_agent(tiger, seed=0, d_sub=8, hidden=8)
    cfg = TrainConfig(total_steps=512, eval_every=256, eval_episodes=20, refit_every=256,
                      eval_horizon=3)
    result = train(tiger, m, enc, ac, cfg, refined, checkpoint_dir=tmp_path / "ckpt")
    assert result.env_steps == 512
    assert [r.env_steps for r in result.metrics] == [256, 512]
    assert all(np.isfinite(r.eval_return) for r in result.metrics)
    for name in ("model.pomdp", "latent.pomdp", "encoder.bin", "ac.bin", "config"):
        assert (tmp_path / "ckpt" / name).exists()
    write_metrics(result.metrics, tmp_path / "metrics.csv")
    assert (tmp_path / "metrics.csv").read_text().startswith("env_steps,train_return")


def test_training_is_deterministic(tiger):
    rows = []
    for _ in range(2):
        refined, m, enc, ac = build_agent(tiger, seed=1, d_sub=8, hidden=8)
        cfg = TrainConfig(total_steps=256, eval_every=128, eval_episodes=10, refit_every=128,
                          eval_horizon=2, seed=1)
        rows.append([r.row() for r in train(tiger, m, enc, ac, cfg, refined).metrics])
    assert rows[0] == rows[1]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(n_envs=0)
    assert TrainConfig.from_dict({"entropy_final": ""}).entropy_final is None
    assert TrainConfig(total_steps=100).entropy_at(50) == pytest.approx(0.05)


def test_greedy_evaluation_seeded(tiger):
    refined, m, enc, ac = build_agent(tiger, seed=0, d_sub=8, hidden=8)
    cfg = TrainConfig(eval_episodes=30, eval_max_steps=20)
    assert evaluate_agent(tiger, enc, ac, cfg, 3) == evaluate_agent(tiger, enc, ac, cfg, 3)
