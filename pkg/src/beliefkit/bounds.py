"""Numeric checks of the value-difference bounds on small tabular POMDPs.

All values are truncated to a fixed number of remaining steps. ``holds``
allows the declared truncation slack; ``holds_strict`` compares the truncated
values directly with no slack.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import (ExactLatentEncoder, LatentPolicy, belief_loss_exact, encode_nodes,
                      latent_distance, regularizers)
from .exact import ValueEngine, model_max_reward, tail_bound, unfold_histories
from .latent import LatentPomdp, RefinedPomdp, local_losses, observation_loss, refine
from .measures import discrete_metric
from .planning import solve
from .pomdp import History, Pomdp

ATOL = 1e-8
MIN_PAIR_PROB = 1e-6
PLAN_HORIZON = 4


class ContractError(ValueError):
    pass


LOSS_KEYS = ("L_R", "L_P", "L_O", "L_tau", "reg_R", "reg_P")
COMPONENT_KEYS = LOSS_KEYS + ("R_star", "K_V", "gamma", "truncation_tail")


def loss_components(refined: RefinedPomdp, m: LatentPomdp, enc, nodes, encoded=None) -> dict:
    """The six losses over the history measure carried by ``nodes``."""
    encoded = encode_nodes(enc, m, nodes) if encoded is None else encoded
    l_r, l_p = local_losses(refined, m, nodes)
    reg_r, reg_p = regularizers(enc, m, refined, nodes, encoded)
    return {"L_R": l_r, "L_P": l_p, "L_O": observation_loss(refined, m, nodes),
            "L_tau": belief_loss_exact(enc, m, nodes, encoded), "reg_R": reg_r, "reg_P": reg_p}


def theorem1_rhs(c: dict) -> float:
    r, k, g = c["R_star"], c["K_V"], c["gamma"]
    inner = c["L_P"] + c["reg_P"] + c["L_tau"] + c["L_O"]
    return (c["L_R"] + c["reg_R"] + r * c["L_tau"] + g * k * inner) / (1.0 - g)


def theorem2_loss_term(c: dict) -> float:
    r, k, g = c["R_star"], c["K_V"], c["gamma"]
    inner = c["L_P"] + c["reg_P"] + c["L_O"]
    return (c["L_R"] + c["reg_R"] + (k + r) * c["L_tau"] + g * k * inner) / (1.0 - g)


def _constants(pomdp: Pomdp, m: LatentPomdp, k: int) -> dict:
    r_star = m.max_abs_reward
    worst = max(r_star, model_max_reward(pomdp))
    return {"R_star": r_star, "K_V": r_star / (1.0 - m.gamma), "gamma": m.gamma,
            "truncation_tail": tail_bound(m.gamma, worst, k)}


@dataclass
class BoundReport:
    lhs: float
    rhs: float
    components: dict
    holds: bool
    holds_strict: bool
    n_histories: int = 0
    labels: dict = field(default_factory=dict)

    FIELDS = ("lhs", "rhs") + COMPONENT_KEYS + ("holds", "holds_strict", "n_histories")

    def row(self) -> dict:
        out = dict(self.labels)
        out.update(lhs=self.lhs, rhs=self.rhs, **self.components, holds=self.holds,
                   holds_strict=self.holds_strict, n_histories=self.n_histories)
        return out


def theorem1_check(pomdp: Pomdp, m: LatentPomdp, enc, policy_fn, horizon: int,
                   refined: RefinedPomdp | None = None,
                   value_horizon: int | None = None) -> BoundReport:
    """Average value gap between ``pomdp`` and ``m`` under a latent policy.

    ``policy_fn`` maps latent beliefs from ``enc`` to action distributions.
    ``V(h)`` is evaluated on ``pomdp`` from the exact belief of ``h``;
    ``V̄(h)`` on ``m`` from the exact latent belief of ``h``. Both runs keep
    the encoder memory reached at ``h`` so the same policy continues.
    """
    refined = refined or refine(pomdp)
    k = value_horizon or horizon
    ctrl = LatentPolicy(enc, policy_fn, pomdp.n_actions)
    nodes = unfold_histories(pomdp, ctrl, horizon).nodes
    encoded = encode_nodes(enc, m, nodes)
    v = ValueEngine(pomdp, ctrl).node_values(nodes, k)
    v_bar = ValueEngine(m, ctrl).node_values(nodes, k, beliefs=encoded[1])
    probs = np.array([n.probability for n in nodes])
    lhs = math.fsum(probs * np.abs(v - v_bar))
    comps = loss_components(refined, m, enc, nodes, encoded)
    comps.update(_constants(pomdp, m, k))
    rhs = theorem1_rhs(comps)
    slack = 2.0 * comps["truncation_tail"]
    return BoundReport(lhs, rhs, comps, lhs <= rhs + slack + ATOL, lhs <= rhs + ATOL, len(nodes))


@dataclass
class PairReport:
    h1: History
    h2: History
    value_gap: float
    wasserstein_term: float
    loss_term: float
    inverse_probs: tuple[float, float]
    tail: float
    holds: bool
    holds_strict: bool

    FIELDS = ("h1", "h2", "value_gap", "wasserstein_term", "loss_term", "inv_p1", "inv_p2",
              "rhs", "holds", "holds_strict")

    @property
    def rhs(self) -> float:
        return self.wasserstein_term + self.loss_term * sum(self.inverse_probs)

    def row(self) -> dict:
        return {"h1": str(self.h1), "h2": str(self.h2), "value_gap": self.value_gap,
                "wasserstein_term": self.wasserstein_term, "loss_term": self.loss_term,
                "inv_p1": self.inverse_probs[0], "inv_p2": self.inverse_probs[1],
                "rhs": self.rhs, "holds": self.holds, "holds_strict": self.holds_strict}


def latent_optimal_policy(m: LatentPomdp, horizon: int):
    """Greedy policy over the optimal ``horizon``-step latent Q-values."""
    solution = solve(m, horizon)
    return solution.greedy


def theorem2_check(pomdp: Pomdp, m: LatentPomdp, enc, horizon: int, pairs=None,
                   n_pairs: int = 100, seed: int = 0, refined: RefinedPomdp | None = None,
                   value_horizon: int | None = None, min_prob: float = MIN_PAIR_PROB,
                   plan_horizon: int = PLAN_HORIZON) -> tuple[list[PairReport], dict]:
    """Value gaps of history pairs under the latent-optimal policy.

    The policy is greedy over the optimal ``plan_horizon``-step latent
    Q-values, re-planned at every step.

    ``pairs`` lists ``(h1, h2)``; when omitted, ``n_pairs`` pairs are drawn
    with ``seed`` among histories of probability at least ``min_prob``.
    Returns the pair reports and the loss components they share.
    """
    refined = refined or refine(pomdp)
    k = value_horizon or horizon
    ctrl = LatentPolicy(enc, latent_optimal_policy(m, plan_horizon), pomdp.n_actions)
    nodes = unfold_histories(pomdp, ctrl, horizon).nodes
    encoded = encode_nodes(enc, m, nodes)
    comps = loss_components(refined, m, enc, nodes, encoded)
    comps.update(_constants(pomdp, m, k))
    loss_term = theorem2_loss_term(comps)
    index = {n.history: i for i, n in enumerate(nodes)}
    if pairs is None:
        eligible = np.flatnonzero([n.probability >= min_prob for n in nodes])
        rng = np.random.default_rng(seed)
        picks = rng.choice(eligible, size=(n_pairs, 2))
    else:
        picks = []
        for h1, h2 in pairs:
            for h in (h1, h2):
                if h not in index or nodes[index[h]].probability <= 0:
                    raise ContractError(f"history {h} has zero probability; the bound is vacuous")
            picks.append((index[h1], index[h2]))
        picks = np.array(picks, dtype=int).reshape(-1, 2)
    used = np.unique(picks)
    values = np.zeros(len(nodes))
    values[used] = ValueEngine(pomdp, ctrl).node_values([nodes[i] for i in used], k)
    phi = encoded[0]
    tail = comps["truncation_tail"]
    reports = []
    for i, j in picks:
        gap = abs(values[i] - values[j])
        w_term = comps["K_V"] * latent_distance(m, phi[i], phi[j])
        inv = (1.0 / nodes[i].probability, 1.0 / nodes[j].probability)
        rhs = w_term + loss_term * sum(inv)
        reports.append(PairReport(nodes[i].history, nodes[j].history, gap, w_term, loss_term, inv,
                                  tail, gap <= rhs + 4.0 * tail + ATOL, gap <= rhs + ATOL))
    return reports, comps


@dataclass
class LipschitzReport:
    max_ratio: float
    k_v: float
    slack: float
    n_pairs: int

    @property
    def holds(self) -> bool:
        return self.max_ratio <= self.k_v + self.slack + ATOL


def lipschitz_value_check(m: LatentPomdp, horizon: int, n_pairs: int, seed: int = 0) -> LipschitzReport:
    """Largest ``|V̄*(b1) - V̄*(b2)| / W(b1, b2)`` over random latent-belief pairs.

    Half of the pairs are flat-Dirichlet draws and half are pairs of Diracs.
    """
    if not np.array_equal(m.metric, discrete_metric(m.n_latent)):
        raise ContractError("the Lipschitz check needs the discrete latent metric")
    solution = solve(m, horizon)
    rng = np.random.default_rng(seed)
    z = m.n_latent
    n_soft = n_pairs - n_pairs // 2
    b1 = rng.dirichlet(np.ones(z), size=n_soft)
    b2 = rng.dirichlet(np.ones(z), size=n_soft)
    pairs = rng.integers(0, z, size=(n_pairs // 2, 2))
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    eye = np.eye(z)
    b1 = np.vstack([b1, eye[pairs[:, 0]]])
    b2 = np.vstack([b2, eye[pairs[:, 1]]])
    dist = 0.5 * np.abs(b1 - b2).sum(axis=1)
    keep = dist > 0
    gaps = np.abs(solution.value(b1) - solution.value(b2))
    ratios = gaps[keep] / dist[keep]
    k_v = m.max_abs_reward / (1.0 - m.gamma)
    slack = 2.0 * tail_bound(m.gamma, m.max_abs_reward, horizon) / float(dist[keep].min())
    return LipschitzReport(float(ratios.max(initial=0.0)), k_v, slack, int(keep.sum()))


def zero_loss_witness(pomdp: Pomdp, horizon: int, policy_fn=None):
    """Theorem 1 with the exact latent model and the exact latent filter."""
    from .latent import fit_exact
    from .encoder import linear_latent_policy

    refined = refine(pomdp)
    m = fit_exact(refined)
    enc = ExactLatentEncoder(m)
    policy_fn = policy_fn or linear_latent_policy(m.n_latent, pomdp.n_actions, 0)
    return theorem1_check(pomdp, m, enc, policy_fn, horizon, refined)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(rows: list[dict], path, fields=None) -> None:
    fields = list(fields or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in fields])


# -- sweeps -----------------------------------------------------------------

CHECKPOINTS = ("untrained", "mid", "trained")


def encoder_checkpoints(pomdp: Pomdp, refined: RefinedPomdp, m: LatentPomdp, seed: int,
                        train_steps: int = 2000, names=CHECKPOINTS) -> dict:
    """Encoders at several training stages, fitted to ``m`` under a uniform policy.

    ``mid`` is trained for a tenth of ``train_steps``; ``exact`` is the exact
    latent filter of whatever model it is later evaluated against.
    """
    from .encoder import BeliefConfig, BeliefEncoder, train_belief
    from .exact import UniformPolicy

    out = {}
    for name in names:
        if name == "exact":
            out[name] = None
            continue
        steps = {"untrained": 0, "mid": max(train_steps // 10, 1), "trained": train_steps}[name]
        enc = BeliefEncoder.for_model(m, seed=seed)
        cfg = BeliefConfig(steps=steps, eval_every=max(steps, 1), seed=seed)
        out[name] = train_belief(enc, m, pomdp, UniformPolicy(pomdp.n_actions), cfg, refined)[0]
    return out


def _sweep_job(job) -> tuple[list[dict], list[dict]]:
    from .encoder import linear_latent_policy
    from .envs import make_env
    from .latent import fit_exact, perturb

    env, seed, eps_list, pair_eps, horizon, names, train_steps, n_pairs = job
    pomdp = make_env(env) if isinstance(env, str) else env
    label = env if isinstance(env, str) else pomdp.name
    refined = refine(pomdp)
    base = fit_exact(refined)
    encoders = encoder_checkpoints(pomdp, refined, base, seed, train_steps, names)
    policy_fn = linear_latent_policy(base.n_latent, pomdp.n_actions, seed)
    t1, t2 = [], []
    for eps in sorted(set(eps_list) | set(pair_eps)):
        m = perturb(base, eps, np.random.default_rng(seed))
        for name in names:
            enc = encoders[name] or ExactLatentEncoder(m)
            labels = {"env": label, "seed": seed, "eps": eps, "encoder": name}
            if eps in eps_list:
                rep = theorem1_check(pomdp, m, enc, policy_fn, horizon, refined)
                rep.labels = labels
                t1.append(rep.row())
            if eps in pair_eps and name == names[-1] and n_pairs > 0:
                pairs, _ = theorem2_check(pomdp, m, enc, horizon, n_pairs=n_pairs, seed=seed,
                                          refined=refined)
                t2.extend({**labels, **p.row()} for p in pairs)
    return t1, t2


def bound_sweep(envs, eps_list, seeds, horizon: int = 5, checkpoints=CHECKPOINTS,
                train_steps: int = 2000, pair_eps=(), n_pairs: int = 100,
                workers: int = 1) -> tuple[list[dict], list[dict]]:
    """Theorem 1 rows for every (env, seed, eps, encoder) and Theorem 2 pair rows.

    Theorem 2 pairs are drawn at each eps in ``pair_eps`` with the last listed
    encoder checkpoint. Jobs run one per (env, seed), in order, on up to
    ``workers`` processes; results do not depend on ``workers``.
    """
    jobs = [(env, seed, tuple(eps_list), tuple(pair_eps), horizon, tuple(checkpoints),
             train_steps, n_pairs) for env in envs for seed in seeds]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    t1 = [r for res in results for r in res[0]]
    t2 = [r for res in results for r in res[1]]
    return t1, t2


THEOREM1_FIELDS = ("env", "seed", "eps", "encoder") + BoundReport.FIELDS
THEOREM2_FIELDS = ("env", "seed", "eps", "encoder") + PairReport.FIELDS
