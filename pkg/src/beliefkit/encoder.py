"""Learned latent belief filter.

A ``BeliefEncoder`` keeps a sub-belief vector ``beta``. Each step maps
``(beta, one-hot action, one-hot observation)`` through two tanh layers to the
next sub-belief, and a linear head turns a sub-belief into a distribution over
latent states. The empty history is always encoded as the latent initial
state; its sub-belief ``beta0`` is a trainable parameter.

Training minimises the divergence between the head output and the exact latent
belief update applied to the previous (constant) head output. Sub-beliefs fed
into a step are constants, so no gradient crosses time steps; only ``beta0``
receives gradient as an input, since it is a parameter and not the result of an
earlier step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .exact import DENOM_FLOOR, Controller, ImpossibleObservation
from .latent import STAR, LatentPomdp, RefinedPomdp
from .measures import discrete_metric, kl, tv, wasserstein

LOG_FLOOR = 1e-12
EXACT_SUM_LIMIT = 256


def _onehot(idx, n: int) -> np.ndarray:
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), np.asarray(idx, dtype=int)] = 1.0
    return out


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class BeliefEncoder:
    """Sub-belief recurrence with a categorical head over latent states."""

    def __init__(self, n_actions: int, n_observations: int, n_latent: int, root_latent: int,
                 d_sub: int = 64, hidden: int = 64, seed: int = 0):
        self.n_actions, self.n_observations, self.n_latent = n_actions, n_observations, n_latent
        self.root_latent = root_latent
        self.memory_size = d_sub
        rng = np.random.default_rng(seed)
        d_in = d_sub + n_actions + n_observations

        def glorot(a, b):
            return rng.normal(0.0, 1.0 / math.sqrt(a), size=(a, b))

        self.params = ad.Params({
            "g1.w": glorot(d_in, hidden), "g1.b": np.zeros(hidden),
            "g2.w": glorot(hidden, d_sub), "g2.b": np.zeros(d_sub),
            "head.w": glorot(d_sub, n_latent), "head.b": np.zeros(n_latent),
            "beta0": rng.normal(0.0, 0.1, size=d_sub),
        })

    @classmethod
    def for_model(cls, m: LatentPomdp, **kwargs) -> "BeliefEncoder":
        return cls(m.n_actions, m.n_observations, m.n_latent, m.initial_latent, **kwargs)

    @property
    def root_belief(self) -> np.ndarray:
        b = np.zeros(self.n_latent)
        b[self.root_latent] = 1.0
        return b

    def initial(self) -> np.ndarray:
        return self.params["beta0"].value.copy()

    def _inputs(self, memory, actions, observations):
        return np.hstack([memory, _onehot(actions, self.n_actions),
                          _onehot(observations, self.n_observations)])

    def update(self, memory, actions, observations) -> np.ndarray:
        p = self.params
        x = self._inputs(np.asarray(memory, dtype=float), actions, observations)
        h = np.tanh(x @ p["g1.w"].value + p["g1.b"].value)
        return np.tanh(h @ p["g2.w"].value + p["g2.b"].value)

    def logits(self, memory) -> np.ndarray:
        return np.asarray(memory) @ self.params["head.w"].value + self.params["head.b"].value

    def beliefs(self, memory, at_root=None) -> np.ndarray:
        out = _softmax(self.logits(np.atleast_2d(memory)))
        if at_root is not None:
            out[np.asarray(at_root, dtype=bool)] = self.root_belief
        return out

    def step_graph(self, beta_in: ad.Node, actions, observations) -> tuple[ad.Node, ad.Node]:
        """Differentiable step: ``(beta_next, logits)`` for a batch."""
        p = self.params
        x = ad.concat([beta_in, ad.const(_onehot(actions, self.n_actions)),
                       ad.const(_onehot(observations, self.n_observations))], axis=1)
        h = ad.tanh(ad.affine(x, p["g1.w"], p["g1.b"]))
        beta = ad.tanh(ad.affine(h, p["g2.w"], p["g2.b"]))
        return beta, ad.affine(beta, p["head.w"], p["head.b"])

    def input_node(self, memory, from_root=None) -> ad.Node:
        """Sub-belief inputs as a constant, except rows equal to the trainable ``beta0``."""
        memory = np.asarray(memory, dtype=float)
        if from_root is None or not np.any(from_root):
            return ad.const(memory)
        mask = np.asarray(from_root, dtype=float)[:, None] * np.ones_like(memory)
        tiled = ad.add(ad.const(np.zeros_like(memory)), self.params["beta0"])
        return ad.add(ad.mul(tiled, ad.const(mask)), ad.const(memory * (1.0 - mask)))


class ExactLatentEncoder:
    """Reference encoder whose memory is the exact latent belief."""

    def __init__(self, m: LatentPomdp):
        self.m = m
        self.n_latent = m.n_latent
        self.memory_size = m.n_latent
        self.root_latent = m.initial_latent

    @property
    def root_belief(self) -> np.ndarray:
        return self.m.initial_belief

    def initial(self) -> np.ndarray:
        return self.m.initial_belief

    def update(self, memory, actions, observations) -> np.ndarray:
        return latent_update_batch(self.m, memory, actions, observations)

    def beliefs(self, memory, at_root=None) -> np.ndarray:
        return np.array(np.atleast_2d(memory), dtype=float)


def latent_update_batch(m, beliefs, actions, observations) -> np.ndarray:
    """Row-wise exact latent belief update; raises on an impossible observation."""
    b = np.atleast_2d(np.asarray(beliefs, dtype=float))
    actions = np.asarray(actions, dtype=int)
    pred = np.einsum("nz,zny->ny", b, m.transition[:, actions, :])
    num = pred * m.obs_probs[:, np.asarray(observations, dtype=int)].T
    den = num.sum(axis=1)
    bad = np.flatnonzero(den <= DENOM_FLOOR)
    if len(bad):
        i = int(bad[0])
        raise ImpossibleObservation(b[i], int(actions[i]), int(observations[i]))
    return num / den[:, None]


def encode_step(enc, beta, a: int, o: int) -> tuple[np.ndarray, np.ndarray]:
    nxt = enc.update(np.asarray(beta, dtype=float)[None, :], [a], [o])
    return nxt[0], enc.beliefs(nxt)[0]


class LatentPolicy(Controller):
    """Controller acting on the latent beliefs produced by an encoder."""

    def __init__(self, enc, fn, n_actions: int):
        self.enc = enc
        self.fn = fn
        self.n_actions = n_actions
        self.memory_size = enc.memory_size

    def initial(self):
        return self.enc.initial()

    def update(self, memory, actions, observations):
        return self.enc.update(memory, actions, observations)

    def action_probs(self, memory, at_root):
        return self.fn(self.enc.beliefs(memory, at_root))


def linear_latent_policy(n_latent: int, n_actions: int, seed: int = 0, temperature: float = 0.0):
    """Random linear scores over latent beliefs; ``temperature=0`` is greedy
    with ties to the lowest action index."""
    w = np.random.default_rng(seed).normal(size=(n_latent, n_actions))

    def fn(beliefs):
        scores = np.atleast_2d(beliefs) @ w
        if temperature > 0:
            return _softmax(scores / temperature)
        first = np.argmax(scores >= scores.max(axis=1, keepdims=True) - 1e-12, axis=1)
        return _onehot(first, n_actions)

    return fn


# -- training losses --------------------------------------------------------

def _targets(m: LatentPomdp, beliefs, actions, observations):
    b = np.atleast_2d(np.asarray(beliefs, dtype=float))
    pred = np.einsum("nz,zny->ny", b, m.transition[:, np.asarray(actions, dtype=int), :])
    lik = m.obs_probs[:, np.asarray(observations, dtype=int)].T
    norm = (pred * lik).sum(axis=1)
    bad = np.flatnonzero(norm <= DENOM_FLOOR)
    if len(bad):
        i = int(bad[0])
        raise ImpossibleObservation(b[i], int(actions[i]), int(observations[i]))
    cost = -np.log(np.maximum(pred, LOG_FLOOR)) - np.log(np.maximum(lik, LOG_FLOOR))
    return pred, lik, norm, cost


def kl_proxy_loss(enc: BeliefEncoder, m: LatentPomdp, beliefs, actions, observations, memory,
                  from_root=None, n_samples: int = 1, rng=None, exact: bool | None = None):
    """Divergence proxy between the encoder's next latent belief and the exact
    latent update of ``beliefs``, averaged over the batch.

    Returns ``(loss, diagnostics, probs)`` where ``probs`` is the head output
    node (reused by the regularisers). ``diagnostics['kl_full']`` adds back
    the log-normaliser, which is constant in the encoder parameters.
    """
    pred, lik, norm, cost = _targets(m, beliefs, actions, observations)
    beta_in = enc.input_node(memory, from_root)
    _, logits = enc.step_graph(beta_in, actions, observations)
    logp = ad.log_softmax(logits)
    probs = ad.softmax(logits)
    exact = m.n_latent <= EXACT_SUM_LIMIT if exact is None else exact
    per_row = np.sum(probs.value * (logp.value + cost), axis=1)
    if exact:
        loss = ad.mean(ad.sum(ad.mul(probs, ad.add(logp, ad.const(cost))), axis=1))
    else:
        if n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        rng = rng or np.random.default_rng(0)
        n = len(per_row)
        terms = []
        for _ in range(n_samples):
            u = rng.random(n)
            z = np.minimum((np.cumsum(probs.value, axis=1) < u[:, None]).sum(axis=1),
                           m.n_latent - 1)
            f = logp.value[np.arange(n), z] + cost[np.arange(n), z]
            terms.append(ad.mean(ad.mul(ad.const(f), ad.gather(logp, z))))
        loss = terms[0]
        for t in terms[1:]:
            loss = ad.add(loss, t)
        loss = ad.scale(loss, 1.0 / n_samples)
    kl_full = per_row + np.log(norm)
    diag = {"kl_proxy": float(np.mean(per_row)), "kl_full": float(np.mean(kl_full)),
            "kl_rows": kl_full}
    return loss, diag, probs


def transition_distances(m: LatentPomdp) -> np.ndarray:
    """``D[a, z1, z2]`` = Wasserstein distance between latent transition rows."""
    z, n_a = m.n_latent, m.n_actions
    P = m.transition
    if np.array_equal(m.metric, discrete_metric(z)):
        return 0.5 * np.abs(P.transpose(1, 0, 2)[:, :, None, :]
                            - P.transpose(1, 0, 2)[:, None, :, :]).sum(axis=3)
    out = np.zeros((n_a, z, z))
    for a in range(n_a):
        for i in range(z):
            for j in range(i + 1, z):
                out[a, i, j] = out[a, j, i] = wasserstein(P[i, a], P[j, a], m.metric)[0]
    return out


def regularizer_costs(m: LatentPomdp, true_latent, action_probs, dist=None):
    """Per-row cost vectors over latent states for both on-policy regularisers."""
    dist = transition_distances(m) if dist is None else dist
    zt = np.asarray(true_latent, dtype=int)
    pi = np.atleast_2d(action_probs)
    rew = np.abs(m.reward[zt][:, None, :] - m.reward[None, :, :])   # (N, Z, A)
    cost_r = np.einsum("nza,na->nz", rew, pi)
    cost_p = np.einsum("anz,na->nz", dist[:, zt, :], pi)
    return cost_r, cost_p


# -- exact evaluation over the history measure --------------------------------

def encode_nodes(enc, m: LatentPomdp, nodes):
    """Encoder beliefs and exact latent beliefs for every node.

    Nodes must list every prefix before its extensions (as unfoldings do).
    Returns ``(phi, tau)`` of shape (N, n_latent).
    """
    index = {n.history: i for i, n in enumerate(nodes)}
    depth = np.array([len(n.history) for n in nodes])
    mem = np.zeros((len(nodes), enc.memory_size))
    tau = np.zeros((len(nodes), m.n_latent))
    for d in range(int(depth.max()) + 1 if len(nodes) else 0):
        ids = np.flatnonzero(depth == d)
        if d == 0:
            mem[ids] = enc.initial()
            tau[ids] = m.initial_belief
            continue
        parents = np.array([index[nodes[i].history.prefix(d - 1)] for i in ids])
        acts = np.array([nodes[i].history.actions[-1] for i in ids])
        obs = np.array([nodes[i].history.observations[-1] for i in ids])
        mem[ids] = enc.update(mem[parents], acts, obs)
        tau[ids] = latent_update_batch(m, tau[parents], acts, obs)
    phi = enc.beliefs(mem, depth == 0)
    return phi, tau


def true_latents(refined: RefinedPomdp, m: LatentPomdp, node):
    """Latent images of ``(s, last observation)`` over the node's belief support."""
    o = node.last_observation
    o = STAR if o is None else o
    states = np.flatnonzero(node.belief > 0)
    ids = [refined.index[(int(s), o)] for s in states]
    return m.embedding[ids], node.belief[states]


@dataclass
class BeliefLossReport:
    step: int = 0
    kl_proxy: float = float("nan")
    kl_full: float = float("nan")
    belief_wasserstein: float = 0.0
    reg_reward: float = 0.0
    reg_transition: float = 0.0
    pinsker_bound: float = 0.0
    per_step: dict = field(default_factory=dict)

    CSV_FIELDS = ("step", "kl_proxy", "kl_full", "belief_wasserstein", "reg_reward",
                  "reg_transition")

    def row(self) -> list[str]:
        return [str(self.step)] + [repr(float(getattr(self, k))) for k in self.CSV_FIELDS[1:]]


def latent_distance(m: LatentPomdp, p, q) -> float:
    """Wasserstein distance under the latent metric (total variation when discrete)."""
    if np.array_equal(m.metric, discrete_metric(m.n_latent)):
        return tv(p, q)
    return wasserstein(p, q, m.metric)[0]


def belief_loss_exact(enc, m: LatentPomdp, nodes, encoded=None) -> float:
    """Expected Wasserstein distance between exact and encoded latent beliefs."""
    phi, tau = encode_nodes(enc, m, nodes) if encoded is None else encoded
    return math.fsum(n.probability * latent_distance(m, t, p)
                     for n, p, t in zip(nodes, phi, tau) if n.probability > 0)


def regularizers(enc, m: LatentPomdp, refined: RefinedPomdp, nodes, encoded=None,
                 dist=None) -> tuple[float, float]:
    """Exact on-policy reward and transition regularisers over ``nodes``."""
    phi, _ = encode_nodes(enc, m, nodes) if encoded is None else encoded
    dist = transition_distances(m) if dist is None else dist
    reg_r = reg_p = 0.0
    for n, p in zip(nodes, phi):
        zt, w = true_latents(refined, m, n)
        cost_r, cost_p = regularizer_costs(m, zt, np.repeat(n.action_probs[None, :], len(zt), 0),
                                           dist)
        reg_r += n.probability * float(w @ (cost_r @ p))
        reg_p += n.probability * float(w @ (cost_p @ p))
    return reg_r, reg_p


def evaluate_belief(enc, m: LatentPomdp, refined: RefinedPomdp, nodes, step: int = 0,
                    kl_proxy: float = float("nan"), kl_full: float = float("nan")) -> BeliefLossReport:
    encoded = encode_nodes(enc, m, nodes)
    phi, tau = encoded
    per_step: dict[int, float] = {}
    w_total = pinsker = 0.0
    for n, p, t in zip(nodes, phi, tau):
        w = n.probability * latent_distance(m, t, p)
        per_step[len(n.history)] = per_step.get(len(n.history), 0.0) + w
        w_total += w
        pinsker += n.probability * math.sqrt(kl(t, p) / 2.0)
    reg_r, reg_p = regularizers(enc, m, refined, nodes, encoded)
    return BeliefLossReport(step, kl_proxy, kl_full, w_total, reg_r, reg_p, pinsker, per_step)


def write_curve(curve, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(BeliefLossReport.CSV_FIELDS)
        for rep in curve:
            w.writerow(rep.row())


# -- training ---------------------------------------------------------------

@dataclass
class BeliefConfig:
    lr: float = 1e-2
    lr_final: float = 1e-3
    grad_clip: float = 1.0
    steps: int = 2000
    batch: int = 16
    rollout_len: int = 8
    sigma_start: float = 0.1
    sigma_end: float = 0.0
    anneal_frac: float = 0.5
    reg_weight: float = 0.1
    eval_every: int = 100
    eval_horizon: int = 5
    max_episode_steps: int = 16
    seed: int = 0

    def sigma_at(self, step: int) -> float:
        span = max(int(self.anneal_frac * self.steps), 1)
        frac = min(step / span, 1.0)
        return self.sigma_start + frac * (self.sigma_end - self.sigma_start)

    @classmethod
    def from_dict(cls, d: dict) -> "BeliefConfig":
        known = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in known:
                raise KeyError(f"unknown belief option {k!r}")
            out[k] = float(v) if known[k] == "float" else int(v)
        return cls(**out)


def belief_batch_loss(enc: BeliefEncoder, m: LatentPomdp, batch, reg_weight: float,
                      action_fn, dist=None):
    """Loss of one on-policy batch (see ``rollout.Transitions``)."""
    prev_beliefs = enc.beliefs(batch.memory, batch.at_root)
    loss, diag, probs = kl_proxy_loss(enc, m, prev_beliefs, batch.actions, batch.next_obs,
                                      batch.memory, from_root=batch.at_root)
    if reg_weight > 0:
        cost_r, cost_p = regularizer_costs(m, batch.next_latent,
                                           action_fn(batch.next_memory_raw), dist)
        reg = ad.mean(ad.sum(ad.mul(probs, ad.const(cost_r + cost_p)), axis=1))
        loss = ad.add(loss, ad.scale(reg, reg_weight))
    return loss, diag


def train_belief(enc: BeliefEncoder, m: LatentPomdp, pomdp, policy: Controller,
                 config: BeliefConfig | None = None, refined: RefinedPomdp | None = None,
                 checkpoint=None):
    """Fit ``enc`` to the exact latent filter of ``m`` on episodes of ``pomdp``.

    ``policy`` receives encoder memory. Returns ``(enc, curve)``; the curve has
    one ``BeliefLossReport`` per ``eval_every`` steps plus one at the end.
    """
    from .exact import unfold_histories
    from .latent import refine
    from .rollout import VecEnv, collect

    cfg = config or BeliefConfig()
    refined = refined or refine(pomdp)
    curve: list[BeliefLossReport] = []
    if cfg.steps <= 0:
        return enc, curve
    opt = ad.Optimizer(enc.params, ad.OptimizerConfig(
        "adam", lr=cfg.lr, max_grad_norm=cfg.grad_clip or None))
    env = VecEnv(pomdp, cfg.batch, cfg.seed, cfg.max_episode_steps)
    eval_ctrl = EncoderControl(enc, policy)
    dist_cache: dict[float, np.ndarray] = {}
    last = {}
    for step in range(cfg.steps):
        sigma = cfg.sigma_at(step)
        ms = m.with_sigma(sigma)
        if sigma not in dist_cache:
            dist_cache.clear()
            dist_cache[sigma] = transition_distances(ms)
        batch = collect(env, enc, refined, ms, eval_ctrl.action_probs, cfg.rollout_len)
        loss, diag = belief_batch_loss(enc, ms, batch, cfg.reg_weight,
                                       lambda mem: eval_ctrl.action_probs(mem, None),
                                       dist_cache[sigma])
        if not np.isfinite(loss.value):
            if checkpoint is not None:
                ad.save_params(enc.params, checkpoint)
            raise ad.TrainingError(f"non-finite belief loss at step {step}")
        ad.backward(loss)
        opt.config.lr = cfg.lr + (cfg.lr_final - cfg.lr) * step / cfg.steps
        try:
            opt.step()
        except ad.TrainingError:
            if checkpoint is not None:
                ad.save_params(enc.params, checkpoint)
            raise
        last = diag
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.steps:
            nodes = unfold_histories(pomdp, eval_ctrl, cfg.eval_horizon).nodes
            curve.append(evaluate_belief(enc, m.with_sigma(cfg.sigma_end), refined, nodes, done,
                                         last["kl_proxy"], last["kl_full"]))
    return enc, curve


class EncoderControl(Controller):
    """Runs ``enc`` as memory and asks ``policy`` (which reads encoder memory) for actions."""

    def __init__(self, enc, policy: Controller):
        self.enc = enc
        self.policy = policy
        self.n_actions = policy.n_actions
        self.memory_size = enc.memory_size

    def initial(self):
        return self.enc.initial()

    def update(self, memory, actions, observations):
        return self.enc.update(memory, actions, observations)

    def action_probs(self, memory, at_root):
        memory = np.atleast_2d(memory)
        at_root = np.zeros(len(memory), dtype=bool) if at_root is None else at_root
        return self.policy.action_probs(memory, at_root)
