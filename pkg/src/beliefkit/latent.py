"""Observation-refined POMDPs and tabular latent models.

A refined state is a pair ``(s, o)`` of a state and the observation perceived
on entering it; ``STAR`` marks the initial state of an episode, where nothing
has been observed yet. Leaving the reset state leads back to
``(initial_state, STAR)``, so the refined model is itself episodic.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import exact
from .measures import discrete_metric, tv, wasserstein
from .pomdp import CapacityError, Pomdp, dumps, loads, parse_blocks, validate

STAR = -1


@dataclass(frozen=True, eq=False)
class RefinedPomdp:
    base: Pomdp
    pomdp: Pomdp
    pairs: tuple[tuple[int, int], ...]
    index: dict = field(repr=False)

    @property
    def n_states(self) -> int:
        return len(self.pairs)

    def id_of(self, s: int, o: int | None) -> int:
        return self.index[(s, STAR if o is None else o)]


def refine(p: Pomdp, cap: int = 100_000) -> RefinedPomdp:
    """Build the refined POMDP over reachable ``(s, o)`` pairs."""
    start = (p.initial_state, STAR)
    index = {start: 0}
    pairs = [start]
    edges = []  # (z, a, z2, prob)
    queue = deque([start])
    while queue:
        s, o = pair = queue.popleft()
        z = index[pair]
        for a in range(p.n_actions):
            for s2 in np.flatnonzero(p.transition[s, a] > 0):
                t = p.transition[s, a, s2]
                if s == p.reset_state and s2 == p.initial_state:
                    succ = [((int(s2), STAR), t)]
                else:
                    succ = [((int(s2), int(o2)), t * p.observation[s2, a, o2])
                            for o2 in np.flatnonzero(p.observation[s2, a] > 0)]
                for nxt, prob in succ:
                    if nxt not in index:
                        if len(pairs) >= cap:
                            raise CapacityError(f"refined model exceeds {cap} states")
                        index[nxt] = len(pairs)
                        pairs.append(nxt)
                        queue.append(nxt)
                    edges.append((z, a, index[nxt], prob))
    n = len(pairs)
    T = np.zeros((n, p.n_actions, n))
    for z, a, z2, prob in edges:
        T[z, a, z2] += prob
    R = np.array([p.reward[s] for s, _ in pairs])
    O = np.zeros((n, p.n_actions, p.n_observations))
    for z, (s, o) in enumerate(pairs):
        if o == STAR:
            O[z] = p.observation[s]
        else:
            O[z, :, o] = 1.0
    reset = index[(p.reset_state, p.reset_observation)]
    refined = Pomdp(T, R, O, p.gamma, 0, reset, p.reset_observation, name=f"{p.name} refined")
    report = validate(refined)
    if not report.ok:
        raise ValueError(f"refined model is invalid:\n{report}")
    return RefinedPomdp(p, refined, tuple(pairs), index)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    top = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - top)
    return e / e.sum(axis=-1, keepdims=True)


def _log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


@dataclass(frozen=True, eq=False)
class LatentPomdp:
    """Tabular latent POMDP with an embedding of refined states.

    The latent observation function is ``(1 - sigma) * softmax(obs_logits[z])
    + sigma * uniform``; it does not depend on the action.
    """

    transition_logits: np.ndarray
    reward: np.ndarray
    obs_logits: np.ndarray
    sigma: float
    embedding: np.ndarray
    gamma: float
    initial_latent: int
    reset_latent: int
    reset_observation: int
    metric: np.ndarray | None = None

    def __post_init__(self):
        for name in ("transition_logits", "reward", "obs_logits"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        emb = np.array(self.embedding, dtype=int)
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        z = self.transition_logits.shape[0]
        if self.metric is None:
            object.__setattr__(self, "metric", discrete_metric(z))
        if emb.size and (emb.min() < 0 or emb.max() >= z):
            raise ValueError("embedding maps outside the latent space")
        trans = _softmax_rows(self.transition_logits)
        base = _softmax_rows(self.obs_logits)
        obs = (1.0 - self.sigma) * base + self.sigma / base.shape[1]
        for name, arr in (("transition", trans), ("obs_base", base), ("obs_probs", obs)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_latent(self) -> int:
        return self.transition_logits.shape[0]

    n_states = n_latent

    @property
    def n_actions(self) -> int:
        return self.transition_logits.shape[1]

    @property
    def n_observations(self) -> int:
        return self.obs_logits.shape[1]

    @property
    def initial_belief(self) -> np.ndarray:
        b = np.zeros(self.n_latent)
        b[self.initial_latent] = 1.0
        return b

    @property
    def max_abs_reward(self) -> float:
        return float(np.max(np.abs(self.reward)))

    def obs_matrix(self, a: int) -> np.ndarray:
        return self.obs_probs

    def with_sigma(self, sigma: float) -> "LatentPomdp":
        return replace(self, sigma=float(sigma))

    def as_pomdp(self) -> Pomdp:
        obs = np.repeat(self.obs_probs[:, None, :], self.n_actions, axis=1)
        return Pomdp(self.transition, self.reward, obs, self.gamma, self.initial_latent,
                     self.reset_latent, self.reset_observation, name="latent")


def latent_belief_update(m: LatentPomdp, b, a: int, o: int) -> np.ndarray:
    return exact.belief_update(m, b, a, o)


def latent_filter(m: LatentPomdp, h) -> np.ndarray:
    return exact.filter_belief(m, h)


def _padded(refined: RefinedPomdp, n_latent: int | None):
    n = refined.n_states
    z = n if n_latent is None else n_latent
    if z < n:
        raise CapacityError(f"n_latent={z} is smaller than the {n} reachable refined states")
    return n, z


def _assemble(refined, trans, reward, obs, n_latent, sigma) -> LatentPomdp:
    n = refined.n_states
    emb = np.arange(n)
    return LatentPomdp(_log(trans), reward, _log(obs), sigma, emb, refined.pomdp.gamma,
                       int(emb[refined.pomdp.initial_state]), int(emb[refined.pomdp.reset_state]),
                       refined.pomdp.reset_observation)


def _pad_tables(n, z, n_a, n_o):
    trans = np.zeros((z, n_a, z))
    for extra in range(n, z):
        trans[extra, :, extra] = 1.0
    return trans, np.zeros((z, n_a)), np.full((z, n_o), 1.0 / n_o)


def fit_exact(refined: RefinedPomdp, n_latent: int | None = None, sigma: float = 0.0) -> LatentPomdp:
    """Copy the refined tables into a latent model with the identity embedding."""
    n, z = _padded(refined, n_latent)
    rp = refined.pomdp
    trans, reward, obs = _pad_tables(n, z, rp.n_actions, rp.n_observations)
    trans[:n, :, :n] = rp.transition
    reward[:n] = rp.reward
    obs[:n] = rp.observation.mean(axis=1)
    return _assemble(refined, trans, reward, obs, z, sigma)


@dataclass
class TransitionCounts:
    """Counts of refined transitions ``(z, a) -> z2`` and of what they paid."""

    transitions: np.ndarray
    reward_sum: np.ndarray
    observations: np.ndarray

    @classmethod
    def empty(cls, refined: RefinedPomdp) -> "TransitionCounts":
        n, n_a, n_o = refined.n_states, refined.pomdp.n_actions, refined.pomdp.n_observations
        return cls(np.zeros((n, n_a, n)), np.zeros((n, n_a)), np.zeros((n, n_o)))

    def add(self, z: int, a: int, z2: int, o2: int, r: float, weight: float = 1.0) -> None:
        self.transitions[z, a, z2] += weight
        self.reward_sum[z, a] += weight * r
        self.observations[z2, o2] += weight

    def add_batch(self, z, a, z2, o2, r) -> None:
        np.add.at(self.transitions, (z, a, z2), 1.0)
        np.add.at(self.reward_sum, (z, a), r)
        np.add.at(self.observations, (z2, o2), 1.0)

    @property
    def total(self) -> float:
        return float(self.transitions.sum())


def fit_counts(refined: RefinedPomdp, counts: TransitionCounts, n_latent: int | None = None,
               smoothing: float = 1.0, sigma: float = 0.0) -> LatentPomdp:
    """Laplace-smoothed empirical tables; rows without data fall back to uniform."""
    n, z = _padded(refined, n_latent)
    rp = refined.pomdp
    n_a, n_o = rp.n_actions, rp.n_observations
    trans, reward, obs = _pad_tables(n, z, n_a, n_o)
    c = np.zeros((n, n_a, z))
    c[:, :, :n] = counts.transitions
    visits = counts.transitions.sum(axis=2)
    rows = c + smoothing
    norm = rows.sum(axis=2, keepdims=True)
    trans[:n] = np.where(norm > 0, rows / np.where(norm > 0, norm, 1.0), 1.0 / z)
    reward[:n] = np.divide(counts.reward_sum, visits, out=np.zeros_like(visits), where=visits > 0)
    orow = counts.observations + smoothing
    onorm = orow.sum(axis=1, keepdims=True)
    obs[:n] = np.where(onorm > 0, orow / np.where(onorm > 0, onorm, 1.0), 1.0 / n_o)
    return _assemble(refined, trans, reward, obs, z, sigma)


def perturb(m: LatentPomdp, eps: float, rng: np.random.Generator) -> LatentPomdp:
    """Mix every transition and observation row with a random distribution.

    Row ``p`` becomes ``(1 - eps) p + eps q`` with ``q`` drawn from a flat
    Dirichlet; rewards move by ``eps * R * u`` with ``u`` uniform in [-1, 1]
    and ``R`` the largest absolute latent reward.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    z, n_a, n_o = m.n_latent, m.n_actions, m.n_observations
    q_trans = rng.dirichlet(np.ones(z), size=(z, n_a))
    q_obs = rng.dirichlet(np.ones(n_o), size=z)
    jitter = rng.uniform(-1.0, 1.0, size=(z, n_a))
    if eps == 0.0:
        return m
    trans = (1.0 - eps) * m.transition + eps * q_trans
    obs = (1.0 - eps) * m.obs_base + eps * q_obs
    r_star = m.max_abs_reward or 1.0
    return replace(m, transition_logits=_log(trans), obs_logits=_log(obs),
                   reward=m.reward + eps * r_star * jitter)


def shift_rewards(m: LatentPomdp, c: float) -> LatentPomdp:
    return replace(m, reward=m.reward + c)


# -- losses -----------------------------------------------------------------

def refined_ids(refined: RefinedPomdp, node) -> tuple[np.ndarray, np.ndarray]:
    """Refined ids ``(s, o_h)`` in the support of a node's belief, with weights."""
    o = node.last_observation
    o = STAR if o is None else o
    states = np.flatnonzero(node.belief > 0)
    return np.array([refined.index[(int(s), o)] for s in states], dtype=int), node.belief[states]


def state_action_weights(refined: RefinedPomdp, nodes) -> np.ndarray:
    """``W[z, a]``: probability of refined state ``z`` and action ``a`` under the
    history measure (h ~ H, s ~ belief(h), a ~ policy(h))."""
    w = np.zeros((refined.n_states, refined.pomdp.n_actions))
    for node in nodes:
        ids, bs = refined_ids(refined, node)
        np.add.at(w, ids, node.probability * bs[:, None] * node.action_probs[None, :])
    return w


def pushforward(refined: RefinedPomdp, m: LatentPomdp, z: int, a: int) -> np.ndarray:
    return np.bincount(m.embedding, weights=refined.pomdp.transition[z, a], minlength=m.n_latent)


def local_gaps(refined: RefinedPomdp, m: LatentPomdp) -> tuple[np.ndarray, np.ndarray]:
    """Per ``(refined state, action)`` reward gap and transition Wasserstein gap."""
    n, n_a = refined.n_states, refined.pomdp.n_actions
    emb = m.embedding
    reward_gap = np.abs(refined.pomdp.reward - m.reward[emb[:n]])
    trans_gap = np.zeros((n, n_a))
    for z in range(n):
        for a in range(n_a):
            trans_gap[z, a] = wasserstein(pushforward(refined, m, z, a), m.transition[emb[z], a],
                                          m.metric)[0]
    return reward_gap, trans_gap


def observation_gaps(refined: RefinedPomdp, m: LatentPomdp) -> np.ndarray:
    """Per ``(refined state, action)`` expected observation TV over next states."""
    base, rp = refined.base, refined.pomdp
    n, n_a = refined.n_states, rp.n_actions
    gaps = np.zeros((n, n_a))
    for z in range(n):
        for a in range(n_a):
            by_state: dict[int, list] = {}
            for z2 in np.flatnonzero(rp.transition[z, a] > 0):
                s2 = refined.pairs[z2][0]
                by_state.setdefault(s2, []).append(z2)
            total = 0.0
            for s2, succ in by_state.items():
                weights = rp.transition[z, a, succ]
                p_s2 = weights.sum()
                mix = (weights / p_s2) @ m.obs_probs[m.embedding[succ]]
                total += p_s2 * tv(base.observation[s2, a], mix)
            gaps[z, a] = total
    return gaps


def local_losses(refined: RefinedPomdp, m: LatentPomdp, nodes) -> tuple[float, float]:
    """``(L_R, L_P)`` averaged over the history measure carried by ``nodes``."""
    w = state_action_weights(refined, nodes)
    reward_gap, trans_gap = local_gaps(refined, m)
    return float(np.sum(w * reward_gap)), float(np.sum(w * trans_gap))


def observation_loss(refined: RefinedPomdp, m: LatentPomdp, nodes) -> float:
    w = state_action_weights(refined, nodes)
    return float(np.sum(w * observation_gaps(refined, m)))


# -- text format ------------------------------------------------------------

def dumps_latent(m: LatentPomdp) -> str:
    base = replace(m, sigma=0.0).as_pomdp()
    extra = [f"SIGMA {m.sigma!r}"] + [f"EMBED {r} {z}" for r, z in enumerate(m.embedding)]
    return dumps(base, extra)


def loads_latent(text: str) -> LatentPomdp:
    _, blocks = parse_blocks(text)
    p = loads(text)
    sigma = 0.0
    embedding = {}
    for tag, ids, values in blocks:
        if tag == "SIGMA":
            sigma = float(ids[0] if ids else values[0])
        elif tag == "EMBED":
            embedding[int(ids[0])] = int(ids[1])
    emb = np.array([embedding[r] for r in range(len(embedding))], dtype=int)
    return LatentPomdp(_log(p.transition), p.reward, _log(p.observation[:, 0, :]), sigma, emb,
                       p.gamma, p.initial_state, p.reset_state, p.reset_observation)


def save_latent(m: LatentPomdp, path) -> None:
    with open(path, "w") as f:
        f.write(dumps_latent(m))


def load_latent(path) -> LatentPomdp:
    with open(path) as f:
        return loads_latent(f.read())
