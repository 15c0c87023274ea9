"""Finite tabular POMDPs: validation, simulation and a plain-text format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ROW_TOL = 1e-9


class StructuralError(ValueError):
    """Tables have inconsistent shapes or ids are out of range."""


class PolicyError(ValueError):
    """A policy returned something that is not a distribution over actions."""


class CapacityError(RuntimeError):
    """A configured size cap would be exceeded."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Pomdp:
    """Tabular POMDP.

    ``transition[s, a, s2]`` is P(s2 | s, a), ``reward[s, a]`` is R(s, a) and
    ``observation[s2, a, o]`` is the probability of perceiving ``o`` upon
    entering ``s2`` under ``a``.
    """

    transition: np.ndarray
    reward: np.ndarray
    observation: np.ndarray
    gamma: float
    initial_state: int
    reset_state: int
    reset_observation: int
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "reward", _frozen(self.reward))
        object.__setattr__(self, "observation", _frozen(self.observation))
        object.__setattr__(self, "gamma", float(self.gamma))
        for name in ("initial_state", "reset_state", "reset_observation"):
            object.__setattr__(self, name, int(getattr(self, name)))
        _check_shapes(self)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_observations(self) -> int:
        return self.observation.shape[2]

    @property
    def max_abs_reward(self) -> float:
        return float(np.max(np.abs(self.reward))) if self.reward.size else 0.0

    @property
    def initial_belief(self) -> np.ndarray:
        return self.dirac(self.initial_state)

    def obs_matrix(self, a: int) -> np.ndarray:
        """Observation probabilities ``[s', o]`` upon entering ``s'`` under ``a``."""
        return self.observation[:, a, :]

    def dirac(self, s: int) -> np.ndarray:
        b = np.zeros(self.n_states)
        b[s] = 1.0
        return b


def _check_shapes(p: Pomdp) -> None:
    problems = []
    if p.transition.ndim != 3 or p.transition.shape[0] != p.transition.shape[2]:
        problems.append(f"transition has shape {p.transition.shape}, expected (S, A, S)")
    else:
        n_s, n_a = p.transition.shape[:2]
        if p.reward.shape != (n_s, n_a):
            problems.append(f"reward has shape {p.reward.shape}, expected {(n_s, n_a)}")
        if p.observation.ndim != 3 or p.observation.shape[:2] != (n_s, n_a):
            problems.append(
                f"observation has shape {p.observation.shape}, expected ({n_s}, {n_a}, O)"
            )
    if problems:
        raise StructuralError("; ".join(problems))
    if not 0 <= p.initial_state < p.n_states:
        raise StructuralError(f"initial_state {p.initial_state} out of range")
    if not 0 <= p.reset_state < p.n_states:
        raise StructuralError(f"reset_state {p.reset_state} out of range")
    if not 0 <= p.reset_observation < p.n_observations:
        raise StructuralError(f"reset_observation {p.reset_observation} out of range")


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return "\n".join(self.violations)


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def _reachable(support: np.ndarray, start: int) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        s = stack.pop()
        for s2 in np.flatnonzero(support[s].any(axis=0)):
            if s2 not in seen:
                seen.add(int(s2))
                stack.append(int(s2))
    return seen


def validate(p: Pomdp) -> ValidationReport:
    """List every violated invariant of ``p`` (empty report when valid)."""
    report = ValidationReport()
    v = report.violations
    n_s, n_a, n_o = p.n_states, p.n_actions, p.n_observations

    if not 0.0 <= p.gamma < 1.0:
        v.append(f"gamma {_fmt(p.gamma)} not in [0, 1)")
    if not np.all(np.isfinite(p.reward)):
        v.append("reward table has non-finite entries")

    for s in range(n_s):
        for a in range(n_a):
            row = p.transition[s, a]
            if np.any(row < 0) or not np.all(np.isfinite(row)):
                v.append(f"row (s={s},a={a}) has negative or non-finite entries")
            total = math.fsum(row)
            if abs(total - 1.0) > ROW_TOL:
                v.append(f"row (s={s},a={a}) sums to {_fmt(total)}")
    for s2 in range(n_s):
        for a in range(n_a):
            row = p.observation[s2, a]
            if np.any(row < 0) or not np.all(np.isfinite(row)):
                v.append(f"observation row (s'={s2},a={a}) has negative or non-finite entries")
            total = math.fsum(row)
            if abs(total - 1.0) > ROW_TOL:
                v.append(f"observation row (s'={s2},a={a}) sums to {_fmt(total)}")

    reset, init, o_star = p.reset_state, p.initial_state, p.reset_observation
    if reset == init:
        v.append("reset state equals initial state")
    allowed = np.zeros(n_s, dtype=bool)
    allowed[[init, reset]] = True
    for a in range(n_a):
        stray = p.transition[reset, a, ~allowed].sum()
        if stray > ROW_TOL:
            v.append(f"reset row (a={a}) leaks mass {_fmt(stray)} outside {{initial, reset}}")
        if p.transition[reset, a, init] <= 0:
            v.append(f"reset row (a={a}) never returns to the initial state")
        obs = p.observation[reset, a]
        if abs(obs[o_star] - 1.0) > ROW_TOL:
            v.append(f"reset observable fails: reset state emits o*={o_star} with "
                     f"probability {_fmt(obs[o_star])} under a={a}")
    for s2 in range(n_s):
        if s2 == reset:
            continue
        for a in range(n_a):
            if p.observation[s2, a, o_star] > 0:
                v.append(f"reset observable fails: state {s2} emits o*={o_star} under a={a}")

    # States from which some policy avoids the reset forever form the greatest
    # fixed point of {s : some action keeps all mass inside the set}.
    support = p.transition > 0
    avoid = np.ones(n_s, dtype=bool)
    avoid[reset] = False
    while True:
        stays = (support & ~avoid[None, None, :]).sum(axis=2) == 0
        keep = avoid & stays.any(axis=1)
        if np.array_equal(keep, avoid):
            break
        avoid = keep
    trapped = sorted(s for s in _reachable(support, init) if avoid[s])
    if trapped:
        v.append(f"reset not reached almost surely: some policy avoids it forever from states {trapped}")
    return report


def _sample(row: np.ndarray, u: float) -> int:
    cdf = np.cumsum(row)
    i = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    if i >= len(row):
        i = int(np.flatnonzero(row)[-1])
    return i


def step(p: Pomdp, state: int, action: int, rng: np.random.Generator) -> tuple[int, int, float]:
    """Sample one transition. Returns ``(next_state, observation, reward)``."""
    if not 0 <= state < p.n_states:
        raise IndexError(f"state {state} out of range")
    if not 0 <= action < p.n_actions:
        raise IndexError(f"action {action} out of range")
    s2 = _sample(p.transition[state, action], rng.random())
    o = _sample(p.observation[s2, action], rng.random())
    return s2, o, float(p.reward[state, action])


@dataclass(frozen=True)
class History:
    """Alternating action/observation sequence; the action comes first."""

    actions: tuple[int, ...] = ()
    observations: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))
        object.__setattr__(self, "observations", tuple(int(o) for o in self.observations))
        if len(self.actions) != len(self.observations):
            raise ValueError("history needs one observation per action")

    def __len__(self) -> int:
        return len(self.actions)

    def extend(self, action: int, observation: int) -> "History":
        return History(self.actions + (action,), self.observations + (observation,))

    def prefix(self, n: int) -> "History":
        return History(self.actions[:n], self.observations[:n])

    @property
    def last_observation(self) -> int | None:
        return self.observations[-1] if self.observations else None

    def pairs(self):
        return zip(self.actions, self.observations)

    def __str__(self) -> str:
        return " ".join(f"{a} {o}" for a, o in self.pairs())

    @classmethod
    def parse(cls, text: str) -> "History":
        tokens = [int(t) for t in text.split()]
        if len(tokens) % 2:
            raise ValueError("history needs an even number of integers: a0 o1 a1 o2 ...")
        return cls(tuple(tokens[0::2]), tuple(tokens[1::2]))


@dataclass(frozen=True)
class Trajectory:
    states: tuple[int, ...]
    actions: tuple[int, ...]
    rewards: tuple[float, ...]
    truncated: bool = False

    @property
    def undiscounted_return(self) -> float:
        return math.fsum(self.rewards)

    def discounted_return(self, gamma: float) -> float:
        return sum(r * gamma**t for t, r in enumerate(self.rewards))


def _as_distribution(probs, n_actions: int) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (n_actions,) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-6:
        raise PolicyError(f"policy returned {probs!r}, not a distribution over {n_actions} actions")
    return probs


def run_episode(
    p: Pomdp,
    policy: Callable[[History], Sequence[float]],
    rng: np.random.Generator,
    max_steps: int = 10_000,
) -> tuple[Trajectory, History]:
    """Simulate from the initial state until the reset observation or ``max_steps``.

    ``policy`` maps the history so far to a distribution over actions.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    s = p.initial_state
    states, rewards = [s], []
    h = History()
    for _ in range(max_steps):
        probs = _as_distribution(policy(h), p.n_actions)
        a = _sample(probs, rng.random())
        s, o, r = step(p, s, a, rng)
        states.append(s)
        rewards.append(r)
        h = h.extend(a, o)
        if o == p.reset_observation:
            return Trajectory(tuple(states), h.actions, tuple(rewards)), h
    return Trajectory(tuple(states), h.actions, tuple(rewards), truncated=True), h


# -- text format -----------------------------------------------------------

def dumps(p: Pomdp, extra: Sequence[str] = ()) -> str:
    lines = [
        f"pomdp v1 states={p.n_states} actions={p.n_actions} obs={p.n_observations} "
        f"gamma={p.gamma!r} init={p.initial_state} reset={p.reset_state} "
        f"reset_obs={p.reset_observation}"
    ]
    if p.name:
        lines.insert(0, f"# {p.name}")
    for s in range(p.n_states):
        for a in range(p.n_actions):
            lines.append(f"T {s} {a}: " + " ".join(repr(float(x)) for x in p.transition[s, a]))
    for s in range(p.n_states):
        for a in range(p.n_actions):
            lines.append(f"R {s} {a}: {float(p.reward[s, a])!r}")
    for s in range(p.n_states):
        for a in range(p.n_actions):
            lines.append(f"O {s} {a}: " + " ".join(repr(float(x)) for x in p.observation[s, a]))
    lines.extend(extra)
    return "\n".join(lines) + "\n"


def _parse_header(line: str) -> dict[str, str]:
    tokens = line.split()
    if tokens[:2] != ["pomdp", "v1"]:
        raise StructuralError(f"bad header {line!r}: expected 'pomdp v1 ...'")
    fields = dict(t.split("=", 1) for t in tokens[2:] if "=" in t)
    missing = {"states", "actions", "obs", "gamma", "init", "reset", "reset_obs"} - fields.keys()
    if missing:
        raise StructuralError(f"header missing {sorted(missing)}")
    return fields


def parse_blocks(text: str) -> tuple[dict[str, str], list[tuple[str, list[str], list[str]]]]:
    """Split model text into its header fields and ``(tag, ids, values)`` lines."""
    header = None
    blocks = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if header is None:
            header = _parse_header(line)
            continue
        head, _, rest = line.partition(":")
        parts = head.split()
        if not parts:
            raise StructuralError(f"line {lineno}: empty tag")
        blocks.append((parts[0], parts[1:], rest.split()))
    if header is None:
        raise StructuralError("missing header line")
    return header, blocks


def loads(text: str, name: str = "") -> Pomdp:
    header, blocks = parse_blocks(text)
    n_s, n_a, n_o = int(header["states"]), int(header["actions"]), int(header["obs"])
    T = np.full((n_s, n_a, n_s), np.nan)
    R = np.full((n_s, n_a), np.nan)
    O = np.full((n_s, n_a, n_o), np.nan)
    tables = {"T": (T, n_s), "R": (R, 1), "O": (O, n_o)}
    for tag, ids, values in blocks:
        if tag not in tables:
            continue
        table, width = tables[tag]
        if len(ids) != 2 or len(values) != width:
            raise StructuralError(f"{tag} {' '.join(ids)}: expected 2 ids and {width} values")
        s, a = int(ids[0]), int(ids[1])
        if not (0 <= s < n_s and 0 <= a < n_a):
            raise StructuralError(f"{tag} {s} {a}: id out of range")
        table[s, a] = [float(x) for x in values] if width > 1 else float(values[0])
    for tag, (table, _) in tables.items():
        if np.isnan(table).any():
            idx = np.argwhere(np.isnan(table))[0]
            raise StructuralError(f"{tag} table incomplete, first missing row {tuple(int(i) for i in idx[:2])}")
    return Pomdp(T, R, O, float(header["gamma"]), int(header["init"]), int(header["reset"]),
                 int(header["reset_obs"]), name=name)


def save(p: Pomdp, path) -> None:
    with open(path, "w") as f:
        f.write(dumps(p))


def load(path) -> Pomdp:
    with open(path) as f:
        return loads(f.read(), name=str(path))
