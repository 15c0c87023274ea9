"""Exact belief filtering, history unfolding and history values.

Anything with ``transition`` (Z, A, Z), ``reward`` (Z, A), ``obs_matrix(a)``
(Z, O), ``gamma``, ``initial_belief`` and ``reset_observation`` can be used as
a model here, so the same machinery runs on real and latent POMDPs.

Policies are Mealy machines (``Controller``): a float memory vector updated on
every (action, observation) pair. After a history ending in the reset
observation the process returns to the empty history: the next history is
empty again and the controller memory is re-initialised.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .pomdp import CapacityError, History, Pomdp

DENOM_FLOOR = 1e-300
PRUNE_EPS = 1e-12
NODE_CAP = 1_000_000


class ImpossibleObservation(ValueError):
    def __init__(self, belief, action, observation, prefix_len=None):
        self.belief = np.asarray(belief)
        self.action = action
        self.observation = observation
        self.prefix_len = prefix_len
        where = f" after {prefix_len} steps" if prefix_len is not None else ""
        super().__init__(f"observation {observation} impossible under action {action}{where}")


# -- single-step filtering --------------------------------------------------

def _obs_matrix(model, a: int) -> np.ndarray:
    return model.obs_matrix(a)


def belief_update(model, b, a: int, o: int) -> np.ndarray:
    """Posterior over next states after taking ``a`` and perceiving ``o``."""
    b = np.asarray(b, dtype=float)
    num = (b @ model.transition[:, a, :]) * _obs_matrix(model, a)[:, o]
    den = num.sum()
    if den <= DENOM_FLOOR:
        raise ImpossibleObservation(b, a, o)
    return num / den


def filter_belief(model, h: History, start=None) -> np.ndarray:
    """Fold ``belief_update`` along ``h`` starting from the initial belief."""
    b = model.initial_belief if start is None else np.asarray(start, dtype=float)
    for t, (a, o) in enumerate(h.pairs()):
        try:
            b = belief_update(model, b, a, o)
        except ImpossibleObservation as e:
            raise ImpossibleObservation(e.belief, a, o, prefix_len=t) from None
    return b


def belief_mdp_step(model, b, a: int) -> list[tuple[int, float, np.ndarray]]:
    """Branches ``(o, P(o | b, a), posterior)`` of the belief MDP."""
    pred = np.asarray(b, dtype=float) @ model.transition[:, a, :]
    joint = pred[:, None] * _obs_matrix(model, a)
    probs = joint.sum(axis=0)
    return [(o, float(probs[o]), joint[:, o] / probs[o])
            for o in range(len(probs)) if probs[o] > DENOM_FLOOR]


def belief_reward(model, b, a: int) -> float:
    return float(np.asarray(b, dtype=float) @ model.reward[:, a])


def tail_bound(gamma: float, max_abs_reward: float, horizon: int) -> float:
    if gamma >= 1.0:
        return float("inf")
    return gamma**horizon * max_abs_reward / (1.0 - gamma)


# -- controllers --------------------------------------------------------------

class Controller:
    """Policy with finite float memory, evaluated on batches of memories."""

    memory_size = 0
    n_actions: int

    def initial(self) -> np.ndarray:
        return np.zeros(self.memory_size)

    def update(self, memory: np.ndarray, actions: np.ndarray, observations: np.ndarray) -> np.ndarray:
        return memory

    def action_probs(self, memory: np.ndarray, at_root: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class UniformPolicy(Controller):
    def __init__(self, n_actions: int):
        self.n_actions = n_actions

    def action_probs(self, memory, at_root):
        return np.full((len(memory), self.n_actions), 1.0 / self.n_actions)


class BeliefPolicy(Controller):
    """Acts on the exact belief of ``model``; ``fn`` maps a belief batch to action probabilities."""

    def __init__(self, model, fn):
        self.model = model
        self.fn = fn
        self.n_actions = model.n_actions
        self.memory_size = model.n_states

    def initial(self):
        return np.array(self.model.initial_belief, dtype=float)

    def update(self, memory, actions, observations):
        out = np.empty_like(memory)
        for i, (a, o) in enumerate(zip(actions, observations)):
            pred = memory[i] @ self.model.transition[:, a, :]
            num = pred * self.model.obs_matrix(a)[:, o]
            den = num.sum()
            out[i] = num / den if den > DENOM_FLOOR else pred
        return out

    def action_probs(self, memory, at_root):
        return self.fn(memory)


def is_reset(model, o) -> bool:
    return o == model.reset_observation


def controller_memory(ctrl: Controller, h: History) -> np.ndarray:
    m = ctrl.initial()
    for a, o in h.pairs():
        m = ctrl.update(m[None, :], np.array([a]), np.array([o]))[0]
    return m


def history_policy(ctrl: Controller):
    """Adapt a controller to ``run_episode``'s history -> distribution interface."""
    cache: dict[tuple, np.ndarray] = {}

    def policy(h: History) -> np.ndarray:
        key = (h.actions, h.observations)
        if key not in cache:
            if len(h) == 0:
                cache[key] = ctrl.initial()
            else:
                prev = policy_memory(h.prefix(len(h) - 1))
                cache[key] = ctrl.update(prev[None, :], np.array([h.actions[-1]]),
                                         np.array([h.observations[-1]]))[0]
        return ctrl.action_probs(cache[key][None, :], np.array([len(h) == 0]))[0]

    def policy_memory(h):
        policy(h)
        return cache[(h.actions, h.observations)]

    return policy


# -- history unfolding ------------------------------------------------------

@dataclass
class HistoryNode:
    history: History
    belief: np.ndarray
    reach: float
    probability: float = 0.0
    memory: np.ndarray | None = None
    action_probs: np.ndarray | None = None
    value: float | None = None

    @property
    def last_observation(self):
        return self.history.last_observation


@dataclass
class Unfolding:
    """Histories of one episode up to ``horizon`` with their visit measure.

    ``reach`` is the probability that an episode passes through the history;
    ``probability`` normalises reaches into the stationary measure.
    ``tail_mass`` is the probability that an episode is still running after
    ``horizon`` steps.
    """

    nodes: list[HistoryNode]
    horizon: int
    tail_mass: float
    total_reach: float = field(default=0.0)

    def __iter__(self):
        return iter(self.nodes)

    def __len__(self):
        return len(self.nodes)


def _expand(model, beliefs, probs, prune_mask=None):
    """Children of a batch of nodes: (parent, action, obs, branch prob, posterior)."""
    parents, actions, obs, bprob, post = [], [], [], [], []
    n_obs = model.n_observations
    for a in range(model.n_actions):
        idx = np.flatnonzero(probs[:, a] > 0)
        if prune_mask is not None:
            idx = idx[prune_mask[idx]]
        if len(idx) == 0:
            continue
        pred = beliefs[idx] @ model.transition[:, a, :]
        joint = pred[:, :, None] * model.obs_matrix(a)[None, :, :]
        p = joint.sum(axis=1)
        for o in range(n_obs):
            ok = np.flatnonzero(p[:, o] > DENOM_FLOOR)
            if len(ok) == 0:
                continue
            parents.append(idx[ok])
            actions.append(np.full(len(ok), a))
            obs.append(np.full(len(ok), o))
            bprob.append(p[ok, o])
            post.append(joint[ok, :, o] / p[ok, o, None])
    if not parents:
        z = np.zeros(0, dtype=int)
        return z, z, z, np.zeros(0), np.zeros((0, beliefs.shape[1]))
    parents = np.concatenate(parents)
    order = np.lexsort((np.concatenate(obs), np.concatenate(actions), parents))
    return (parents[order], np.concatenate(actions)[order], np.concatenate(obs)[order],
            np.concatenate(bprob)[order], np.concatenate(post)[order])


def unfold_histories(
    model,
    ctrl: Controller,
    horizon: int,
    prune_eps: float = PRUNE_EPS,
    cap: int = NODE_CAP,
) -> Unfolding:
    """Enumerate the histories of one episode up to ``horizon`` steps.

    Nodes come in lexicographic order of ``a0 o1 a1 o2 ...`` with every prefix
    before its extensions.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    o_star = model.reset_observation
    root = HistoryNode(History(), np.array(model.initial_belief, dtype=float), 1.0,
                       memory=ctrl.initial())
    levels = [[root]]
    kids: dict[int, list[HistoryNode]] = {}
    count = 1
    for depth in range(horizon + 1):
        level = levels[-1]
        mem = np.array([n.memory for n in level]).reshape(len(level), -1)
        probs = ctrl.action_probs(mem, np.full(len(level), depth == 0))
        for n, p in zip(level, probs):
            n.action_probs = p
        if depth == horizon:
            break
        live = np.array([n.last_observation != o_star for n in level])
        beliefs = np.array([n.belief for n in level])
        parent, act, obs, bp, post = _expand(model, beliefs, probs, live)
        reach = np.array([level[i].reach for i in parent]) * probs[parent, act] * bp
        keep = reach > prune_eps
        parent, act, obs, post, reach = parent[keep], act[keep], obs[keep], post[keep], reach[keep]
        count += len(parent)
        if count > cap:
            raise CapacityError(f"more than {cap} histories; use a smaller horizon or environment")
        if len(parent) == 0:
            break
        new_mem = ctrl.update(mem[parent], act, obs)
        nxt = []
        for i, a, o, b, r, m in zip(parent, act, obs, post, reach, new_mem):
            child = HistoryNode(level[i].history.extend(int(a), int(o)), b, float(r), memory=m)
            kids.setdefault(id(level[i]), []).append(child)
            nxt.append(child)
        levels.append(nxt)
    nodes: list[HistoryNode] = []
    stack = [root]
    while stack:
        n = stack.pop()
        nodes.append(n)
        stack.extend(reversed(kids.get(id(n), [])))
    total = math.fsum(n.reach for n in nodes)
    for n in nodes:
        n.probability = n.reach / total
    tail = math.fsum(n.reach for n in nodes
                     if len(n.history) == horizon and n.last_observation != o_star)
    return Unfolding(nodes, horizon, tail, total)


def nodes_to_csv(nodes: Sequence[HistoryNode], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["history", "probability", "value"])
        for n in nodes:
            w.writerow([str(n.history), repr(n.probability), "" if n.value is None else repr(n.value)])


# -- values -----------------------------------------------------------------

class ValueEngine:
    """Truncated history values ``V(h)`` under a controller.

    ``values`` evaluates a batch of roots level by level. Paths that leave a
    history ending in the reset observation continue from the empty history,
    whose values per remaining horizon are memoised. With ``episodic=True``
    the return stops once the reset observation is perceived.
    """

    def __init__(self, model, ctrl: Controller, episodic: bool = False):
        self.model = model
        self.ctrl = ctrl
        self.episodic = episodic
        self._star = [0.0]

    def star_value(self, k: int) -> float:
        if self.episodic:
            return 0.0
        while len(self._star) <= k:
            j = len(self._star)
            b = np.array(self.model.initial_belief, dtype=float)[None, :]
            v = self.values(b, self.ctrl.initial()[None, :], np.array([True]), np.array([False]), j)
            self._star.append(float(v[0]))
        return self._star[k]

    def values(self, beliefs, memory, at_root, at_reset, k: int) -> np.ndarray:
        model, ctrl = self.model, self.ctrl
        o_star = model.reset_observation
        gamma = model.gamma
        n_a = model.n_actions
        if k <= 0:
            return np.zeros(len(beliefs))
        levels = []
        b, m = np.asarray(beliefs, dtype=float), np.asarray(memory, dtype=float)
        root, reset = np.asarray(at_root, dtype=bool), np.asarray(at_reset, dtype=bool)
        link = None
        for depth in range(k):
            probs = ctrl.action_probs(m, root) if len(b) else np.zeros((0, n_a))
            if self.episodic:
                probs = probs * ~reset[:, None]
            lvl = {"probs": probs, "rew": b @ model.reward, "reset": reset, "link": link,
                   "star": np.zeros((len(b), n_a))}
            levels.append(lvl)
            if depth == k - 1 or len(b) == 0:
                break
            parent, act, obs, bp, post = _expand(model, b, probs)
            to_star = reset[parent] & (obs != o_star)
            if self.episodic:
                to_star |= obs == o_star
            if not self.episodic:
                np.add.at(lvl["star"], (parent[to_star], act[to_star]), bp[to_star])
            keep = ~to_star
            parent, act, obs, bp, post = parent[keep], act[keep], obs[keep], bp[keep], post[keep]
            m = ctrl.update(m[parent], act, obs) if len(parent) else np.zeros((0, m.shape[1]))
            b = post
            root = np.zeros(len(b), dtype=bool)
            reset = obs == o_star
            link = (parent, act, bp)
        v_next = None
        for depth in range(len(levels) - 1, -1, -1):
            lvl = levels[depth]
            rem = k - depth
            cont = lvl["star"] * self.star_value(rem - 1) if rem > 1 else np.zeros_like(lvl["star"])
            if v_next is not None:
                parent, act, bp = levels[depth + 1]["link"]
                np.add.at(cont, (parent, act), bp * v_next)
            v_next = (lvl["probs"] * (lvl["rew"] + gamma * cont)).sum(axis=1)
        return v_next

    def node_values(self, nodes: Sequence[HistoryNode], k: int, chunk: int = 64,
                    beliefs=None) -> np.ndarray:
        """Values of unfolding nodes (which carry beliefs and controller memory).

        ``beliefs`` replaces the nodes' own beliefs, e.g. by latent beliefs
        when ``self.model`` is a latent model.
        """
        out = np.zeros(len(nodes))
        o_star = self.model.reset_observation
        for start in range(0, len(nodes), chunk):
            part = nodes[start:start + chunk]
            if beliefs is None:
                b = np.array([n.belief for n in part])
            else:
                b = np.asarray(beliefs[start:start + chunk], dtype=float)
            m = np.array([n.memory for n in part]).reshape(len(part), -1)
            root = np.array([len(n.history) == 0 for n in part])
            reset = np.array([n.last_observation == o_star for n in part])
            out[start:start + chunk] = self.values(b, m, root, reset, k)
        return out


def history_value(model, h: History, ctrl: Controller, horizon: int,
                  episodic: bool = False) -> tuple[float, float]:
    """Truncated value of ``h`` and the bound on what truncation discards."""
    b = filter_belief(model, h)
    m = controller_memory(ctrl, h)
    engine = ValueEngine(model, ctrl, episodic)
    reset = len(h) > 0 and h.last_observation == model.reset_observation
    v = engine.values(b[None, :], m[None, :], np.array([len(h) == 0]), np.array([reset]), horizon)
    return float(v[0]), tail_bound(model.gamma, model_max_reward(model), horizon)


def model_max_reward(model) -> float:
    return float(np.max(np.abs(model.reward)))


def _product_return(model, ctrl: Controller, horizon: int, digits: int = 12) -> float:
    """Expected discounted return by pushing the law of (belief, memory) forward.

    States that agree up to ``digits`` decimals are merged, so histories with
    equal beliefs and equal controller memory are treated as one state.
    """
    o_star = model.reset_observation
    b0 = np.array(model.initial_belief, dtype=float)
    m0 = ctrl.initial()
    states = {("root",): (b0, m0, True, False, 1.0)}
    total = 0.0
    for t in range(horizon):
        keys = list(states)
        b = np.array([states[k][0] for k in keys])
        m = np.array([states[k][1] for k in keys]).reshape(len(keys), -1)
        root = np.array([states[k][2] for k in keys])
        reset = np.array([states[k][3] for k in keys])
        w = np.array([states[k][4] for k in keys])
        probs = ctrl.action_probs(m, root)
        total += model.gamma**t * float(np.sum(w[:, None] * probs * (b @ model.reward)))
        if t == horizon - 1:
            break
        parent, act, obs, bp, post = _expand(model, b, probs)
        weight = w[parent] * probs[parent, act] * bp
        to_star = reset[parent] & (obs != o_star)
        new_mem = ctrl.update(m[parent], act, obs) if len(parent) else m[:0]
        nxt: dict = {}
        for i in range(len(parent)):
            if to_star[i]:
                key = ("root",)
                item = (b0, m0, True, False)
            else:
                key = (np.round(post[i], digits).tobytes(), np.round(new_mem[i], digits).tobytes(),
                       bool(obs[i] == o_star))
                item = (post[i], new_mem[i], False, bool(obs[i] == o_star))
            if key in nxt:
                prev = nxt[key]
                nxt[key] = prev[:4] + (prev[4] + weight[i],)
            else:
                nxt[key] = item + (weight[i],)
        states = nxt
    return total


def bisimulation_value_check(model, ctrl: Controller, horizon: int) -> tuple[float, float]:
    """Gap between the expected return computed on the history unfolding and
    on the belief MDP driven by the controller as a Mealy machine.

    Returns ``(gap, tail_bound)``.
    """
    engine = ValueEngine(model, ctrl)
    unfolded = engine.star_value(horizon)
    product = _product_return(model, ctrl, horizon)
    return abs(unfolded - product), tail_bound(model.gamma, model_max_reward(model), horizon)
