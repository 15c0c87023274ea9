import numpy as np
import pytest

from beliefkit.envs import BUILTIN_ENVS, make_env, make_repeat_previous, repeat_previous_size
from beliefkit.pomdp import (
    History, Pomdp, PolicyError, StructuralError, dumps, load, loads, run_episode, save, step,
    validate,
)


def test_builtins_validate(builtin):
    for name, p in builtin.items():
        assert validate(p).ok, name
        assert str(validate(p)) == "ok"


def test_unknown_env():
    with pytest.raises(KeyError):
        make_env("no-such-env")


def test_repeat_previous_sizes():
    assert make_repeat_previous(2, 1, 4).n_states == 9
    assert repeat_previous_size(2, 2, 4) == 17
    with pytest.raises(ValueError):
        make_repeat_previous(2, 3, 3)


def test_row_sum_violation_is_reported(tiger):
    T = tiger.transition.copy()
    T[1, 1, 1] += 0.1
    bad = Pomdp(T, tiger.reward, tiger.observation, tiger.gamma, 0, 3, 2)
    report = validate(bad)
    assert not report.ok
    assert any("(s=1,a=1)" in v for v in report.violations)


def test_reset_not_observable(tiger):
    O = tiger.observation.copy()
    O[1, 1] = [0.8, 0.1, 0.1]
    report = validate(Pomdp(tiger.transition, tiger.reward, O, tiger.gamma, 0, 3, 2))
    assert any("reset observable" in v for v in report.violations)


def test_reset_avoidable(tiger):
    T = tiger.transition.copy()
    T[1, 1] = [0, 1, 0, 0]
    T[2, 1] = [0, 0, 1, 0]
    report = validate(Pomdp(T, tiger.reward, tiger.observation, tiger.gamma, 0, 3, 2))
    assert any("almost surely" in v for v in report.violations)


def test_bad_gamma(tiger):
    report = validate(Pomdp(tiger.transition, tiger.reward, tiger.observation, 1.0, 0, 3, 2))
    assert any("gamma" in v for v in report.violations)


def test_shape_mismatch_raises(tiger):
    with pytest.raises(StructuralError):
        Pomdp(tiger.transition[:3], tiger.reward, tiger.observation, 0.9, 0, 3, 2)


def test_text_roundtrip(tmp_path, builtin):
    for p in builtin.values():
        q = loads(dumps(p))
        np.testing.assert_array_equal(q.transition, p.transition)
        np.testing.assert_array_equal(q.reward, p.reward)
        np.testing.assert_array_equal(q.observation, p.observation)
        assert (q.gamma, q.initial_state, q.reset_state, q.reset_observation) == (
            p.gamma, p.initial_state, p.reset_state, p.reset_observation)
    path = tmp_path / "tiger.pomdp"
    save(builtin["tiger"], path)
    back = load(path)
    assert dumps(back).split("\n", 1)[1] == dumps(builtin["tiger"]).split("\n", 1)[1]


def test_incomplete_file_rejected(tiger):
    text = "\n".join(line for line in dumps(tiger).splitlines() if not line.startswith("R 1 1"))
    with pytest.raises(StructuralError):
        loads(text)
    with pytest.raises(StructuralError):
        loads("nonsense\n")


def test_history_parse_and_prefix():
    h = History.parse("1 0 1 1")
    assert h.actions == (1, 1) and h.observations == (0, 1)
    assert str(h) == "1 0 1 1"
    assert h.prefix(1) == History((1,), (0,))
    assert h.last_observation == 1
    assert History().last_observation is None
    with pytest.raises(ValueError):
        History.parse("1 0 1")


def test_step_is_seeded(tiger):
    a = [step(tiger, 1, 1, np.random.default_rng(3)) for _ in range(3)]
    assert a[0] == a[1] == a[2]
    with pytest.raises(IndexError):
        step(tiger, 9, 0, np.random.default_rng(0))


def test_episode_ends_with_reset(tiger):
    rng = np.random.default_rng(0)
    traj, h = run_episode(tiger, lambda h: [1 / 3] * 3, rng)
    assert h.last_observation == tiger.reset_observation
    assert not traj.truncated
    assert len(traj.rewards) == len(h)


def test_episode_rejects_bad_policy(tiger):
    with pytest.raises(PolicyError):
        run_episode(tiger, lambda h: [1.0, 1.0, 0.0], np.random.default_rng(0))


def test_repeat_previous_max_return():
    p = make_repeat_previous(2, 1, 6)
    rng = np.random.default_rng(1)

    def copy_last(h):
        probs = np.zeros(2)
        probs[h.observations[-1] if len(h) else 0] = 1.0
        return probs

    for _ in range(20):
        traj, _ = run_episode(p, copy_last, rng)
        assert traj.undiscounted_return == pytest.approx(1.0)


def test_builtin_names_resolve():
    for name in BUILTIN_ENVS:
        assert make_env(name).name == name
