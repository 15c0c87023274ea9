import numpy as np
import pytest

from beliefkit.exact import UniformPolicy, filter_belief, history_value, unfold_histories
from beliefkit.latent import (
    STAR, TransitionCounts, dumps_latent, fit_counts, fit_exact, latent_filter, load_latent,
    loads_latent, local_gaps, local_losses, observation_gaps, observation_loss, perturb, refine, save_latent,
    shift_rewards,
)
from beliefkit.pomdp import CapacityError, History, run_episode, validate

from oracles import consistent_histories, joint_forward, simulate_paths


@pytest.fixture(scope="module")
def tiger_refined(tiger):
    return refine(tiger)


def test_refined_sizes(tiger_refined, rp214):
    assert validate(tiger_refined.pomdp).ok
    assert tiger_refined.pairs[0] == (tiger_refined.base.initial_state, STAR)
    assert refine(rp214).n_states == 8


def test_refinement_preserves_history_laws(tiger, tiger_refined):
    rp = tiger_refined.pomdp
    for acts, obs, post in consistent_histories(tiger, 4):
        a_base = np.zeros(tiger.n_states)
        a_base[tiger.initial_state] = 1
        a_ref = np.zeros(rp.n_states)
        a_ref[0] = 1
        for a, o in zip(acts, obs):
            a_base = joint_forward(tiger, a_base, a, o)
            a_ref = joint_forward(rp, a_ref, a, o)
        assert a_ref.sum() == pytest.approx(a_base.sum(), abs=1e-14)
        projected = np.zeros(tiger.n_states)
        np.add.at(projected, [s for s, _ in tiger_refined.pairs], a_ref / a_ref.sum())
        np.testing.assert_allclose(projected, post, atol=1e-12)


def test_refinement_preserves_values(tiger, tiger_refined):
    for k in (3, 6):
        v, _ = history_value(tiger, History(), UniformPolicy(3), k)
        w, _ = history_value(tiger_refined.pomdp, History(), UniformPolicy(3), k)
        assert v == pytest.approx(w, abs=1e-12)


def test_exact_latent_filter_matches_refined(tiger_refined):
    m = fit_exact(tiger_refined)
    for h in ("1 0 1 0", "1 1 1 1 1 0", "0 1"):
        h = History.parse(h)
        np.testing.assert_allclose(latent_filter(m, h), filter_belief(tiger_refined.pomdp, h),
                                   atol=1e-12)


def test_fit_exact_has_zero_local_losses(tiger_refined):
    m = fit_exact(tiger_refined)
    nodes = unfold_histories(tiger_refined.base, UniformPolicy(3), 4).nodes
    assert local_losses(tiger_refined, m, nodes) == pytest.approx((0.0, 0.0), abs=1e-12)
    assert observation_loss(tiger_refined, m, nodes) == pytest.approx(0.0, abs=1e-12)


def test_padding_and_capacity(tiger_refined):
    m = fit_exact(tiger_refined, n_latent=tiger_refined.n_states + 3)
    assert m.n_latent == tiger_refined.n_states + 3
    np.testing.assert_allclose(m.transition.sum(axis=2), 1.0)
    with pytest.raises(CapacityError):
        fit_exact(tiger_refined, n_latent=2)


def test_fit_counts_converges(tiger, tiger_refined):
    counts = TransitionCounts.empty(tiger_refined)
    rng = np.random.default_rng(0)
    for _ in range(4000):
        traj, h = run_episode(tiger, lambda h: np.full(3, 1 / 3), rng)
        prev = tiger_refined.id_of(traj.states[0], None)
        for t, (a, o) in enumerate(h.pairs()):
            z2 = tiger_refined.id_of(traj.states[t + 1], o)
            counts.add(prev, a, z2, o, traj.rewards[t])
            prev = z2
    m = fit_counts(tiger_refined, counts, smoothing=0.0)
    exact = fit_exact(tiger_refined)
    seen = counts.transitions.sum(axis=2) > 200
    assert np.abs(m.transition[seen] - exact.transition[seen]).max() < 0.05
    np.testing.assert_allclose(m.reward[seen], exact.reward[seen], atol=1e-12)


def test_perturb(tiger_refined):
    m = fit_exact(tiger_refined)
    assert perturb(m, 0.0, np.random.default_rng(0)) is m
    q = perturb(m, 0.3, np.random.default_rng(0))
    np.testing.assert_allclose(q.transition.sum(axis=2), 1.0)
    np.testing.assert_allclose(q.obs_probs.sum(axis=1), 1.0)
    assert np.abs(q.reward - m.reward).max() <= 0.3 * m.max_abs_reward + 1e-12
    with pytest.raises(ValueError):
        perturb(m, 1.5, np.random.default_rng(0))


def test_losses_grow_with_eps(tiger_refined):
    base = fit_exact(tiger_refined)
    nodes = unfold_histories(tiger_refined.base, UniformPolicy(3), 4).nodes
    prev = (0.0, 0.0)
    for eps in (0.1, 0.3, 0.6):
        cur = local_losses(tiger_refined, perturb(base, eps, np.random.default_rng(1)), nodes)
        assert cur[0] > prev[0] and cur[1] > prev[1]
        prev = cur


def test_shift_rewards(tiger_refined):
    m = fit_exact(tiger_refined)
    np.testing.assert_allclose(shift_rewards(m, 2.0).reward, m.reward + 2.0)


def test_sigma_mixing(tiger_refined):
    m = fit_exact(tiger_refined, sigma=0.3)
    n_o = m.n_observations
    np.testing.assert_allclose(m.obs_probs, 0.7 * m.obs_base + 0.3 / n_o)
    assert m.with_sigma(0.0).sigma == 0.0


def test_latent_text_roundtrip(tmp_path, tiger_refined):
    m = perturb(fit_exact(tiger_refined, sigma=0.25), 0.2, np.random.default_rng(3))
    back = loads_latent(dumps_latent(m))
    np.testing.assert_allclose(back.transition, m.transition, atol=1e-14)
    np.testing.assert_allclose(back.obs_base, m.obs_base, atol=1e-14)
    np.testing.assert_array_equal(back.embedding, m.embedding)
    assert back.sigma == m.sigma
    save_latent(m, tmp_path / "m.latent")
    again = load_latent(tmp_path / "m.latent")
    np.testing.assert_allclose(again.transition, m.transition, atol=1e-14)
    np.testing.assert_allclose(again.reward, m.reward, atol=0)


def _ratio_ci(values, counts):
    """Ratio estimate sum(values)/sum(counts) over episodes and its standard error."""
    est = values.sum() / counts.sum()
    resid = values - est * counts
    se = np.sqrt(resid.var() * len(values)) / counts.sum()
    return est, se


def test_losses_match_monte_carlo(tiger, tiger_refined):
    horizon = 4
    m = perturb(fit_exact(tiger_refined), 0.2, np.random.default_rng(4))
    nodes = unfold_histories(tiger, UniformPolicy(3), horizon).nodes
    l_r, l_p = local_losses(tiger_refined, m, nodes)
    l_o = observation_loss(tiger_refined, m, nodes)

    states, acts, obs = simulate_paths(tiger, 1_000_000, horizon, np.random.default_rng(11))
    n = len(states)
    reward_gap = np.abs(tiger_refined.pomdp.reward - m.reward[:tiger_refined.n_states])
    _, trans_gap = local_gaps(tiger_refined, m)
    obs_gap = observation_gaps(tiger_refined, m)
    ids = np.array([[tiger_refined.index.get((s, o), -1) for s in range(tiger.n_states)]
                    for o in [STAR] + list(range(tiger.n_observations))])
    alive = np.ones(n, dtype=bool)
    tot = {"r": np.zeros(n), "p": np.zeros(n), "o": np.zeros(n)}
    count = np.zeros(n)
    for t in range(horizon + 1):
        last = obs[:, t - 1] + 1 if t > 0 else np.zeros(n, dtype=int)
        z = ids[last, states[:, t]]
        assert np.all(z[alive] >= 0)
        a = acts[:, t]
        tot["r"] += alive * reward_gap[z, a]
        tot["p"] += alive * trans_gap[z, a]
        tot["o"] += alive * obs_gap[z, a]
        count += alive
        if t > 0:
            alive &= obs[:, t - 1] != tiger.reset_observation
    for key, exact in (("r", l_r), ("p", l_p), ("o", l_o)):
        est, se = _ratio_ci(tot[key], count)
        assert abs(est - exact) <= 3 * se + 1e-12, (key, est, exact, se)
