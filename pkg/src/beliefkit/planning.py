"""Exact finite-horizon POMDP planning with alpha-vectors.

``solve`` runs exact value iteration with incremental pruning: the optimal
``k``-step value of a belief ``b`` is ``max(alpha @ b)`` over ``gammas[k]``.
Pruning keeps only vectors that are strictly best at some belief, found with
a small linear program per candidate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .exact import Controller

PRUNE_TOL = 1e-10


def _dedupe(vectors: np.ndarray) -> np.ndarray:
    if len(vectors) <= 1:
        return vectors
    keys = np.round(vectors, 12)
    _, first = np.unique(keys, axis=0, return_index=True)
    vectors = vectors[np.sort(first)]
    # drop pointwise dominated vectors
    dominated = np.zeros(len(vectors), dtype=bool)
    for i in range(len(vectors)):
        if dominated[i]:
            continue
        ge = np.all(vectors >= vectors[i] - 1e-13, axis=1)
        ge[i] = False
        ge &= ~dominated
        if ge.any():
            dominated[i] = True
    return vectors[~dominated]


def _witness(alpha: np.ndarray, kept: list[np.ndarray]) -> np.ndarray | None:
    n = len(alpha)
    if not kept:
        return np.full(n, 1.0 / n)
    w = np.array(kept)
    # maximise d subject to b.(alpha - w) >= d for every kept w, b in the simplex
    c = np.zeros(n + 1)
    c[-1] = -1.0
    a_ub = np.hstack([w - alpha, np.ones((len(w), 1))])
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(len(w)),
                  A_eq=np.hstack([np.ones((1, n)), np.zeros((1, 1))]), b_eq=[1.0],
                  bounds=[(0, None)] * n + [(None, None)], method="highs")
    if res.status != 0 or -res.fun <= PRUNE_TOL:
        return None
    return res.x[:n]


def prune(vectors: np.ndarray) -> np.ndarray:
    """Remove vectors that are nowhere strictly optimal on the simplex."""
    vectors = _dedupe(np.asarray(vectors, dtype=float))
    if len(vectors) <= 1:
        return vectors
    # vectors that win at a corner or a sampled belief are kept without an LP
    n = vectors.shape[1]
    probes = np.vstack([np.eye(n), np.random.default_rng(0).dirichlet(np.ones(n), size=8 * n)])
    scores = probes @ vectors.T
    winners = sorted(set(np.argmax(scores >= scores.max(axis=1, keepdims=True) - 1e-12, axis=1)))
    kept = [vectors[i] for i in winners]
    candidates = [v for i, v in enumerate(vectors) if i not in set(winners)]
    while candidates:
        b = _witness(candidates[0], kept)
        if b is None:
            candidates.pop(0)
            continue
        scores = np.array([v @ b for v in candidates])
        best = int(np.flatnonzero(scores >= scores.max() - 1e-12)[0])
        kept.append(candidates.pop(best))
    return np.array(kept) if kept else np.zeros((0, len(vectors[0])))


@dataclass
class AlphaSolution:
    """``gammas[k]`` holds the alpha-vectors of the optimal k-step value."""

    model: object
    gammas: list[np.ndarray]
    episodic: bool

    @property
    def horizon(self) -> int:
        return len(self.gammas) - 1

    def value(self, beliefs, k: int | None = None) -> np.ndarray:
        k = self.horizon if k is None else k
        return np.max(np.atleast_2d(beliefs) @ self.gammas[k].T, axis=1)

    def q_values(self, beliefs, k: int | None = None) -> np.ndarray:
        """``Q_k(b, a)`` for a batch of beliefs, shape (N, A)."""
        k = self.horizon if k is None else k
        B = np.atleast_2d(np.asarray(beliefs, dtype=float))
        m = self.model
        q = B @ m.reward
        if k <= 1:
            return q
        prev = self.gammas[k - 1]
        for a in range(m.n_actions):
            pred = B @ m.transition[:, a, :]
            obs = m.obs_matrix(a)
            for o in _branches(m, self.episodic):
                q[:, a] += m.gamma * np.max((pred * obs[:, o]) @ prev.T, axis=1)
        return q

    def greedy(self, beliefs, k: int | None = None) -> np.ndarray:
        """One-hot argmax of ``Q_k``; ties go to the lowest action index."""
        q = self.q_values(beliefs, k)
        best = q >= q.max(axis=1, keepdims=True) - 1e-12
        first = np.argmax(best, axis=1)
        out = np.zeros_like(q)
        out[np.arange(len(q)), first] = 1.0
        return out


def _branches(model, episodic: bool):
    return [o for o in range(model.n_observations)
            if not (episodic and o == model.reset_observation)]


def solve(model, horizon: int, episodic: bool = False) -> AlphaSolution:
    z = model.n_states
    gammas = [np.zeros((1, z))]
    for _ in range(horizon):
        prev = gammas[-1]
        per_action = []
        for a in range(model.n_actions):
            obs = model.obs_matrix(a)
            acc = np.zeros((1, z))
            for o in _branches(model, episodic):
                proj = model.gamma * (model.transition[:, a, :] * obs[None, :, o]) @ prev.T
                proj = prune(proj.T)
                acc = prune((acc[:, None, :] + proj[None, :, :]).reshape(-1, z))
            per_action.append(acc + model.reward[:, a])
        gammas.append(prune(np.vstack(per_action)))
    return AlphaSolution(model, gammas, episodic)


class FiniteHorizonOptimal(Controller):
    """The optimal non-stationary policy for ``solution.horizon`` steps.

    Memory holds the exact belief followed by the number of steps taken.
    """

    def __init__(self, solution: AlphaSolution):
        self.solution = solution
        self.model = solution.model
        self.n_actions = self.model.n_actions
        self.memory_size = self.model.n_states + 1

    def initial(self):
        return np.append(self.model.initial_belief, 0.0)

    def update(self, memory, actions, observations):
        out = memory.copy()
        for i, (a, o) in enumerate(zip(actions, observations)):
            num = (memory[i, :-1] @ self.model.transition[:, a, :]) * self.model.obs_matrix(a)[:, o]
            den = num.sum()
            out[i, :-1] = num / den if den > 0 else num
            out[i, -1] += 1
        return out

    def action_probs(self, memory, at_root):
        out = np.zeros((len(memory), self.n_actions))
        for i, row in enumerate(memory):
            k = max(self.solution.horizon - int(row[-1]), 1)
            out[i] = self.solution.greedy(row[:-1], k)[0]
        return out


def optimal_value(model, horizon: int, episodic: bool = True) -> float:
    return float(solve(model, horizon, episodic).value(model.initial_belief)[0])
