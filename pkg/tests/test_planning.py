from dataclasses import replace

import numpy as np
import pytest

from beliefkit.exact import history_value
from beliefkit.latent import fit_exact, perturb, refine
from beliefkit.planning import FiniteHorizonOptimal, optimal_value, prune, solve
from beliefkit.pomdp import History

from oracles import expectimax

TIGER_H10_OPTIMUM = 0.8398719901203797


def test_prune_drops_dominated():
    v = np.array([[1.0, 0.0], [0.0, 1.0], [0.4, 0.4], [0.6, 0.6], [1.0, 0.0]])
    kept = prune(v)
    assert len(kept) == 3
    assert not any(np.allclose(k, [0.4, 0.4]) for k in kept)


def test_solve_matches_expectimax(tiger, rng):
    for episodic in (False, True):
        sol = solve(tiger, 4, episodic)
        for k in range(1, 5):
            for _ in range(5):
                b = rng.dirichlet(np.ones(4))
                assert sol.value(b, k)[0] == pytest.approx(expectimax(tiger, b, k, episodic), abs=1e-10)


def test_solve_on_latent_model(tiger, rng):
    m = perturb(fit_exact(refine(tiger)), 0.2, np.random.default_rng(0))
    sol = solve(m, 3)
    for _ in range(5):
        b = rng.dirichlet(np.ones(m.n_latent))
        assert sol.value(b)[0] == pytest.approx(expectimax(m, b, 3), abs=1e-10)


def test_tiger_optimum_frozen(tiger):
    assert optimal_value(replace(tiger, gamma=1.0), 10) == pytest.approx(TIGER_H10_OPTIMUM, abs=1e-12)


def test_greedy_controller_achieves_value(tiger):
    sol = solve(tiger, 5, episodic=True)
    ctrl = FiniteHorizonOptimal(sol)
    v, _ = history_value(tiger, History(), ctrl, 5, episodic=True)
    assert v == pytest.approx(sol.value(tiger.initial_belief)[0], abs=1e-10)


def test_q_values_consistent(tiger, rng):
    sol = solve(tiger, 3)
    b = rng.dirichlet(np.ones(4), size=6)
    np.testing.assert_allclose(sol.q_values(b).max(axis=1), sol.value(b), atol=1e-10)
    g = sol.greedy(b)
    assert np.all(g.sum(axis=1) == 1.0)
