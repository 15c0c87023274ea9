"""Parallel seeded environment workers and on-policy transition batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .latent import STAR, RefinedPomdp
from .pomdp import Pomdp


class VecEnv:
    """``n`` copies of a POMDP stepped in lockstep.

    Worker ``i`` draws every random number from its own generator seeded with
    ``seed + i``. An episode ends when the reset observation is perceived or
    after ``max_episode_steps`` steps; the worker then restarts from the
    initial state with an empty history.
    """

    def __init__(self, pomdp: Pomdp, n_envs: int, seed: int, max_episode_steps: int | None = None):
        if n_envs < 1:
            raise ValueError("n_envs must be positive")
        self.pomdp = pomdp
        self.n = n_envs
        self.max_steps = max_episode_steps
        self.rngs = [np.random.default_rng(seed + i) for i in range(n_envs)]
        self.cum_t = np.cumsum(pomdp.transition, axis=2)
        self.cum_o = np.cumsum(pomdp.observation, axis=2)
        self.state = np.full(n_envs, pomdp.initial_state)
        self.last_obs = np.full(n_envs, STAR)
        self.t = np.zeros(n_envs, dtype=int)
        self.ep_return = np.zeros(n_envs)
        self.histories: list[list[tuple[int, int]]] = [[] for _ in range(n_envs)]
        self.finished: list[float] = []

    @property
    def at_root(self) -> np.ndarray:
        return self.t == 0

    def uniforms(self) -> np.ndarray:
        return np.array([r.random() for r in self.rngs])

    def sample_actions(self, probs: np.ndarray) -> np.ndarray:
        return _pick(np.cumsum(probs, axis=1), self.uniforms())

    def step(self, actions):
        p = self.pomdp
        a = np.asarray(actions, dtype=int)
        s = self.state
        s2 = _pick(self.cum_t[s, a], self.uniforms())
        o2 = _pick(self.cum_o[s2, a], self.uniforms())
        r = p.reward[s, a]
        done = o2 == p.reset_observation
        self.t += 1
        truncated = ~done & (self.t >= self.max_steps) if self.max_steps else np.zeros_like(done)
        self.ep_return += r
        prev = (s.copy(), self.last_obs.copy())
        self.state, self.last_obs = s2.copy(), o2.copy()
        for i in range(self.n):
            self.histories[i].append((int(a[i]), int(o2[i])))
        for i in np.flatnonzero(done | truncated):
            self.finished.append(float(self.ep_return[i]))
            self.state[i] = p.initial_state
            self.last_obs[i] = STAR
            self.t[i] = 0
            self.ep_return[i] = 0.0
            self.histories[i] = []
        return prev[0], prev[1], r, s2, o2, done, truncated

    def pop_finished(self) -> list[float]:
        out, self.finished = self.finished, []
        return out


def _pick(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def encode_histories(enc, histories) -> np.ndarray:
    """Fold ``enc`` along each history; all rows advance together, aligned at the end."""
    lengths = np.array([len(h) for h in histories])
    mem = np.tile(enc.initial(), (len(histories), 1))
    longest = int(lengths.max()) if len(lengths) else 0
    for t in range(longest):
        rows = np.flatnonzero(lengths >= longest - t)
        if len(rows) == 0:
            continue
        pos = t - (longest - lengths[rows])
        acts = np.array([histories[i][p][0] for i, p in zip(rows, pos)])
        obs = np.array([histories[i][p][1] for i, p in zip(rows, pos)])
        mem[rows] = enc.update(mem[rows], acts, obs)
    return mem


@dataclass
class Transitions:
    """One rollout, time-major: arrays have shape (T, N, ...)."""

    memory: np.ndarray
    at_root: np.ndarray
    states: np.ndarray
    last_obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray
    truncated: np.ndarray
    next_memory_raw: np.ndarray
    final_memory: np.ndarray
    final_at_root: np.ndarray
    refined_ids: np.ndarray
    next_refined_ids: np.ndarray
    next_latent: np.ndarray
    version: int = 0

    def flat(self) -> "Transitions":
        def f(x):
            return x.reshape((-1,) + x.shape[2:])
        names = ("memory", "at_root", "states", "last_obs", "actions", "rewards", "next_states",
                 "next_obs", "done", "truncated", "next_memory_raw", "refined_ids",
                 "next_refined_ids", "next_latent")
        out = {k: f(getattr(self, k)) for k in names}
        return Transitions(**out, final_memory=self.final_memory,
                           final_at_root=self.final_at_root, version=self.version)

    @property
    def size(self) -> int:
        return int(np.prod(self.actions.shape))


def collect(env: VecEnv, enc, refined: RefinedPomdp, m, action_fn, steps: int,
            version: int = 0, flat: bool = True) -> Transitions:
    """Run ``steps`` lockstep steps with ``action_fn(memory, at_root)``.

    Worker memories are recomputed from their episode so far with the current
    encoder, so every transition comes from the current parameters.
    """
    mem = encode_histories(enc, env.histories)
    rec = {k: [] for k in ("memory", "at_root", "states", "last_obs", "actions", "rewards",
                           "next_states", "next_obs", "done", "truncated", "next_memory_raw")}
    for _ in range(steps):
        root = env.at_root.copy()
        probs = action_fn(mem, root)
        a = env.sample_actions(probs)
        s, o, r, s2, o2, done, trunc = env.step(a)
        nxt = enc.update(mem, a, o2)
        for k, v in (("memory", mem), ("at_root", root), ("states", s), ("last_obs", o),
                     ("actions", a), ("rewards", r), ("next_states", s2), ("next_obs", o2),
                     ("done", done), ("truncated", trunc), ("next_memory_raw", nxt)):
            rec[k].append(v)
        mem = nxt.copy()
        ended = done | trunc
        if ended.any():
            mem[ended] = enc.initial()
    arr = {k: np.array(v) for k, v in rec.items()}
    index = refined.index
    z = np.vectorize(lambda s, o: index[(int(s), int(o))])(arr["states"], arr["last_obs"])
    z2 = np.vectorize(lambda s, o: index[(int(s), int(o))])(arr["next_states"], arr["next_obs"])
    batch = Transitions(**arr, final_memory=mem, final_at_root=env.at_root.copy(),
                        refined_ids=z, next_refined_ids=z2, next_latent=m.embedding[z2],
                        version=version)
    return batch.flat() if flat else batch


def evaluate(pomdp: Pomdp, enc, action_fn, n_episodes: int, max_steps: int, seed: int) -> np.ndarray:
    """Undiscounted returns of ``n_episodes`` episodes run with observations only."""
    env = VecEnv(pomdp, n_episodes, seed, max_steps)
    returns = np.full(n_episodes, np.nan)
    live = np.ones(n_episodes, dtype=bool)
    mem = np.tile(enc.initial(), (n_episodes, 1))
    acc = np.zeros(n_episodes)
    root = np.ones(n_episodes, dtype=bool)
    while live.any():
        a = env.sample_actions(action_fn(mem, root))
        _, _, r, _, o2, done, trunc = env.step(a)
        acc += r * live
        ended = (done | trunc) & live
        returns[ended] = acc[ended]
        live &= ~ended
        mem = enc.update(mem, a, o2)
        root = np.zeros(n_episodes, dtype=bool)
    return returns
