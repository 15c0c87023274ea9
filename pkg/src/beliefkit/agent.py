"""Advantage actor-critic on sub-beliefs and the round-robin training loop."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .encoder import (BeliefEncoder, belief_batch_loss, encode_nodes,
                      latent_distance, transition_distances)
from .exact import Controller, unfold_histories
from .latent import (LatentPomdp, RefinedPomdp, TransitionCounts, fit_counts, local_losses,
                     observation_loss, refine, save_latent)
from .pomdp import PolicyError, Pomdp, save
from .rollout import Transitions, VecEnv, collect, evaluate


def _softmax(v):
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def greedy_choice(probs: np.ndarray) -> np.ndarray:
    """Index of the largest probability per row; ties go to the lowest index."""
    probs = np.atleast_2d(probs)
    return np.argmax(probs >= probs.max(axis=1, keepdims=True) - 1e-12, axis=1)


class ActorCritic:
    """Policy and value heads over sub-beliefs, each affine -> tanh -> affine.

    ``features`` maps a batch of sub-beliefs to the head inputs (identity by
    default); it is applied outside the graph, so no gradient reaches it.
    """

    def __init__(self, d_in: int, n_actions: int, hidden: int = 64, seed: int = 0, features=None):
        rng = np.random.default_rng(seed)
        self.n_actions = n_actions
        self.features = features or (lambda memory: memory)

        def init(a, b):
            return rng.normal(0.0, 1.0 / math.sqrt(a), size=(a, b))

        self.params = ad.Params({
            "pi1.w": init(d_in, hidden), "pi1.b": np.zeros(hidden),
            "pi2.w": np.zeros((hidden, n_actions)), "pi2.b": np.zeros(n_actions),
            "v1.w": init(d_in, hidden), "v1.b": np.zeros(hidden),
            "v2.w": np.zeros((hidden, 1)), "v2.b": np.zeros(1),
        })
        self.version = 0

    def _np(self, name):
        return self.params[name].value

    def probs(self, memory) -> np.ndarray:
        h = np.tanh(self.features(np.atleast_2d(memory)) @ self._np("pi1.w") + self._np("pi1.b"))
        return _softmax(h @ self._np("pi2.w") + self._np("pi2.b"))

    def value(self, memory) -> np.ndarray:
        h = np.tanh(self.features(np.atleast_2d(memory)) @ self._np("v1.w") + self._np("v1.b"))
        return (h @ self._np("v2.w") + self._np("v2.b"))[:, 0]

    def greedy_probs(self, memory) -> np.ndarray:
        probs = self.probs(memory)
        out = np.zeros_like(probs)
        out[np.arange(len(probs)), greedy_choice(probs)] = 1.0
        return out

    def graph(self, memory):
        """``(log_probs, probs, value)`` nodes for constant sub-belief inputs."""
        x = ad.const(self.features(np.atleast_2d(memory)))
        h = ad.tanh(ad.affine(x, self.params["pi1.w"], self.params["pi1.b"]))
        logits = ad.affine(h, self.params["pi2.w"], self.params["pi2.b"])
        hv = ad.tanh(ad.affine(x, self.params["v1.w"], self.params["v1.b"]))
        v = ad.affine(hv, self.params["v2.w"], self.params["v2.b"])
        return ad.log_softmax(logits), ad.softmax(logits), ad.gather(v, np.zeros(len(x.value)))


def act(ac: ActorCritic, beta, rng: np.random.Generator, greedy: bool = False):
    """Sample (or pick greedily) one action; returns ``(action, log_prob, value)``."""
    probs = ac.probs(beta)[0]
    if greedy:
        a = int(greedy_choice(probs)[0])
    else:
        cdf = np.cumsum(probs)
        a = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(probs) - 1))
    return a, float(np.log(probs[a])), float(ac.value(beta)[0])


class ActorCriticControl(Controller):
    """The actor as a controller whose memory is the encoder's sub-belief."""

    def __init__(self, enc, ac: ActorCritic, greedy: bool = False):
        self.enc, self.ac, self.greedy = enc, ac, greedy
        self.n_actions = ac.n_actions
        self.memory_size = enc.memory_size

    def initial(self):
        return self.enc.initial()

    def update(self, memory, actions, observations):
        return self.enc.update(memory, actions, observations)

    def action_probs(self, memory, at_root):
        return self.ac.greedy_probs(memory) if self.greedy else self.ac.probs(memory)


@dataclass
class TrainConfig:
    n_envs: int = 16
    rollout_len: int = 8
    lr_policy: float = 1e-3
    lr_belief: float = 3e-3
    entropy_coef: float = 0.1
    entropy_final: float | None = 0.0
    value_coef: float = 0.5
    grad_clip: float = 1.0
    gamma: float | None = None
    total_steps: int = 50_000
    belief_steps: int = 1
    reg_weight: float = 0.1
    refit_every: int = 2048
    smoothing: float = 1.0
    sigma_start: float = 0.1
    sigma_end: float = 0.0
    anneal_frac: float = 0.5
    max_episode_steps: int = 0
    eval_every: int = 5000
    eval_episodes: int = 200
    eval_max_steps: int = 0
    eval_horizon: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("n_envs", "rollout_len", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("entropy_coef", "value_coef", "reg_weight", "total_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def entropy_at(self, steps: int) -> float:
        if self.entropy_final is None:
            return self.entropy_coef
        frac = min(steps / max(self.total_steps, 1), 1.0)
        return self.entropy_coef + frac * (self.entropy_final - self.entropy_coef)

    def sigma_at(self, steps: int) -> float:
        span = max(self.anneal_frac * self.total_steps, 1.0)
        frac = min(steps / span, 1.0)
        return self.sigma_start + frac * (self.sigma_end - self.sigma_start)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                raise KeyError(f"unknown agent option {k!r}")
            if v is None or v == "":
                out[k] = None
            elif kinds[k].startswith("float"):
                out[k] = float(v)
            else:
                out[k] = int(v)
        return cls(**out)


def n_step_returns(rewards, ends, bootstrap, gamma: float) -> np.ndarray:
    """Discounted returns of a (T, N) rollout, cut at episode ends and
    bootstrapped with ``bootstrap`` (N,) after the last step."""
    out = np.zeros_like(rewards, dtype=float)
    acc = np.asarray(bootstrap, dtype=float)
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc * (1.0 - ends[t])
        out[t] = acc
    return out


def a2c_loss(ac: ActorCritic, memory, actions, returns, config: TrainConfig,
             entropy_coef: float | None = None):
    """Combined loss node and the scalar parts for flat inputs."""
    entropy_coef = config.entropy_coef if entropy_coef is None else entropy_coef
    logp, probs, v = ac.graph(memory)
    adv = returns - v.value
    lp_a = ad.gather(logp, actions)
    entropy = ad.scale(ad.sum(ad.mul(probs, logp), axis=1), -1.0)
    policy_loss = ad.scale(ad.mean(ad.mul(lp_a, ad.const(adv))), -1.0)
    value_loss = ad.mean(ad.square(ad.add(v, ad.const(-returns))))
    total = ad.add(ad.add(policy_loss, ad.scale(ad.mean(entropy), -entropy_coef)),
                   ad.scale(value_loss, config.value_coef))
    parts = {"policy_loss": float(policy_loss.value), "value_loss": float(value_loss.value),
             "entropy": float(ad.mean(entropy).value), "loss": float(total.value)}
    return total, parts


def a2c_update(ac: ActorCritic, batch: Transitions, config: TrainConfig, optimizer: ad.Optimizer,
               gamma: float, entropy_coef: float | None = None) -> dict:
    """One A2C step on a time-major rollout produced by the current actor."""
    if batch.version != ac.version:
        raise PolicyError(f"batch from actor version {batch.version}, current is {ac.version}")
    ends = (batch.done | batch.truncated).astype(float)
    bootstrap = ac.value(batch.final_memory)
    returns = n_step_returns(batch.rewards, ends, bootstrap, gamma)
    d = batch.memory.shape[-1]
    total, parts = a2c_loss(ac, batch.memory.reshape(-1, d), batch.actions.reshape(-1),
                            returns.reshape(-1), config, entropy_coef)
    if not np.isfinite(total.value):
        raise ad.TrainingError("non-finite actor-critic loss")
    ad.backward(total)
    optimizer.step()
    ac.version += 1
    return parts


@dataclass
class MetricsRow:
    env_steps: int
    train_return: float
    eval_return: float
    belief_loss: float
    kl_full: float
    L_R: float
    L_P: float
    L_O: float

    FIELDS = ("env_steps", "train_return", "eval_return", "belief_loss", "kl_full",
              "L_R", "L_P", "L_O")

    def row(self) -> list[str]:
        return [str(self.env_steps)] + [repr(float(getattr(self, k))) for k in self.FIELDS[1:]]


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MetricsRow.FIELDS)
        for r in rows:
            w.writerow(r.row())


def initial_model(refined: RefinedPomdp) -> LatentPomdp:
    """Latent model before any data: uniform rows, zero rewards."""
    return fit_counts(refined, TransitionCounts.empty(refined))


def save_checkpoint(directory, pomdp: Pomdp, m: LatentPomdp, enc, ac: ActorCritic, config) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    save(pomdp, out / "model.pomdp")
    save_latent(m, out / "latent.pomdp")
    ad.save_params(enc.params, out / "encoder.bin")
    ad.save_params(ac.params, out / "ac.bin")
    (out / "config").write_text(json.dumps(asdict(config), indent=1, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    metrics: list[MetricsRow]
    model: LatentPomdp
    env_steps: int


def evaluate_agent(pomdp: Pomdp, enc, ac: ActorCritic, config: TrainConfig, seed: int) -> float:
    returns = evaluate(pomdp, enc, lambda mem, root: ac.greedy_probs(mem), config.eval_episodes,
                       config.eval_max_steps or None, seed)
    return float(np.mean(returns))


def _loss_snapshot(pomdp, refined, m, enc, ac, horizon):
    nodes = unfold_histories(pomdp, ActorCriticControl(enc, ac), horizon).nodes
    m0 = m.with_sigma(0.0)
    phi, tau = encode_nodes(enc, m0, nodes)
    belief = math.fsum(n.probability * latent_distance(m0, t, p)
                       for n, p, t in zip(nodes, phi, tau))
    l_r, l_p = local_losses(refined, m0, nodes)
    return belief, l_r, l_p, observation_loss(refined, m0, nodes)


def train(pomdp: Pomdp, m: LatentPomdp, enc: BeliefEncoder, ac: ActorCritic,
          config: TrainConfig | None = None, refined: RefinedPomdp | None = None,
          checkpoint_dir=None) -> TrainResult:
    """Round-robin loop: rollouts, model refresh, belief steps, one A2C step."""
    cfg = config or TrainConfig()
    refined = refined or refine(pomdp)
    gamma = pomdp.gamma if cfg.gamma is None else cfg.gamma
    rows: list[MetricsRow] = []
    if cfg.total_steps <= 0:
        return TrainResult(rows, m, 0)
    env = VecEnv(pomdp, cfg.n_envs, cfg.seed, cfg.max_episode_steps or None)
    counts = TransitionCounts.empty(refined)
    opt_pi = ad.Optimizer(ac.params, ad.OptimizerConfig("adam", lr=cfg.lr_policy,
                                                         max_grad_norm=cfg.grad_clip or None))
    opt_b = ad.Optimizer(enc.params, ad.OptimizerConfig("adam", lr=cfg.lr_belief,
                                                        max_grad_norm=cfg.grad_clip or None))
    steps, next_refit, next_eval = 0, 0, cfg.eval_every
    n_latent = m.n_latent
    dist, dist_key = None, None
    kl_full = float("nan")

    def abort(msg):
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, pomdp, m, enc, ac, cfg)
        raise ad.TrainingError(msg)

    while steps < cfg.total_steps:
        ms = m.with_sigma(cfg.sigma_at(steps))
        batch = collect(env, enc, refined, ms, lambda mem, root: ac.probs(mem), cfg.rollout_len,
                        version=ac.version, flat=False)
        counts.add_batch(batch.refined_ids.ravel(), batch.actions.ravel(),
                         batch.next_refined_ids.ravel(), batch.next_obs.ravel(),
                         batch.rewards.ravel())
        steps += batch.size
        if cfg.refit_every and steps >= next_refit:
            m = fit_counts(refined, counts, n_latent, cfg.smoothing)
            next_refit += cfg.refit_every
            ms = m.with_sigma(cfg.sigma_at(steps))
        if dist_key != (id(m), ms.sigma):
            dist, dist_key = transition_distances(ms), (id(m), ms.sigma)
        flat = batch.flat()
        for _ in range(cfg.belief_steps):
            loss, diag = belief_batch_loss(enc, ms, flat, cfg.reg_weight, ac.probs, dist)
            if not np.isfinite(loss.value):
                abort("non-finite belief loss")
            ad.backward(loss)
            opt_b.step()
            kl_full = diag["kl_full"]
        try:
            a2c_update(ac, batch, cfg, opt_pi, gamma, cfg.entropy_at(steps))
        except ad.TrainingError as e:
            abort(str(e))
        if steps >= next_eval or steps >= cfg.total_steps:
            next_eval += cfg.eval_every
            finished = env.pop_finished()
            train_ret = float(np.mean(finished)) if finished else float("nan")
            eval_ret = evaluate_agent(pomdp, enc, ac, cfg, cfg.seed + 1_000_003)
            belief, l_r, l_p, l_o = _loss_snapshot(pomdp, refined, m, enc, ac, cfg.eval_horizon)
            rows.append(MetricsRow(steps, train_ret, eval_ret, belief, kl_full, l_r, l_p, l_o))
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, pomdp, m, enc, ac, cfg)
    return TrainResult(rows, m, steps)


def belief_features(enc):
    """Sub-belief followed by the encoder's latent belief read from it."""
    return lambda memory: np.hstack([memory, enc.beliefs(memory)])


def build_agent(pomdp: Pomdp, seed: int = 0, d_sub: int = 64, hidden: int = 64,
                with_beliefs: bool = True):
    """Fresh ``(refined, latent model, encoder, actor-critic)`` for ``pomdp``."""
    refined = refine(pomdp)
    m = initial_model(refined)
    enc = BeliefEncoder.for_model(m, d_sub=d_sub, hidden=hidden, seed=seed)
    if with_beliefs:
        ac = ActorCritic(d_sub + m.n_latent, pomdp.n_actions, hidden, seed + 1,
                         belief_features(enc))
    else:
        ac = ActorCritic(d_sub, pomdp.n_actions, hidden, seed + 1)
    return refined, m, enc, ac
