"""Built-in episodic environments."""

from __future__ import annotations

import itertools

import numpy as np

from .pomdp import CapacityError, Pomdp, validate

# Tiger ids
START, TIGER_LEFT, TIGER_RIGHT, TIGER_RESET = 0, 1, 2, 3
OPEN_LEFT, LISTEN, OPEN_RIGHT = 0, 1, 2
HEAR_LEFT, HEAR_RIGHT, TIGER_RESET_OBS = 0, 1, 2


def make_tiger(
    accuracy: float = 0.85,
    listen_cost: float = 0.05,
    leave_prob: float = 0.01,
    gamma: float = 0.95,
) -> Pomdp:
    """Tiger behind one of two doors.

    States: start, tiger-left, tiger-right, reset. The start state places the
    tiger uniformly whatever the action. Listening reports the correct side
    with probability ``accuracy`` and costs ``listen_cost``; opening the free
    door pays +1, the tiger's door -1, and both end the episode. While the
    agent listens the tiger leaves with probability ``leave_prob``, which ends
    the episode too, so every policy reaches the reset state almost surely.
    """
    n_s, n_a, n_o = 4, 3, 3
    T = np.zeros((n_s, n_a, n_s))
    R = np.zeros((n_s, n_a))
    O = np.zeros((n_s, n_a, n_o))

    T[START, :, TIGER_LEFT] = 0.5
    T[START, :, TIGER_RIGHT] = 0.5
    for tiger in (TIGER_LEFT, TIGER_RIGHT):
        T[tiger, LISTEN, tiger] = 1.0 - leave_prob
        T[tiger, LISTEN, TIGER_RESET] = leave_prob
        T[tiger, OPEN_LEFT, TIGER_RESET] = 1.0
        T[tiger, OPEN_RIGHT, TIGER_RESET] = 1.0
        R[tiger, LISTEN] = -listen_cost
    T[TIGER_RESET, :, START] = 1.0

    R[TIGER_LEFT, OPEN_LEFT] = -1.0
    R[TIGER_LEFT, OPEN_RIGHT] = 1.0
    R[TIGER_RIGHT, OPEN_LEFT] = 1.0
    R[TIGER_RIGHT, OPEN_RIGHT] = -1.0

    O[START, :, HEAR_LEFT] = 1.0
    O[TIGER_LEFT, LISTEN] = [accuracy, 1.0 - accuracy, 0.0]
    O[TIGER_RIGHT, LISTEN] = [1.0 - accuracy, accuracy, 0.0]
    for tiger in (TIGER_LEFT, TIGER_RIGHT):
        O[tiger, OPEN_LEFT] = [0.5, 0.5, 0.0]
        O[tiger, OPEN_RIGHT] = [0.5, 0.5, 0.0]
    O[TIGER_RESET, :, TIGER_RESET_OBS] = 1.0

    return Pomdp(T, R, O, gamma, START, TIGER_RESET, TIGER_RESET_OBS, name="tiger")


def repeat_previous_size(alphabet: int, k: int, deck_len: int) -> int:
    return alphabet**k * deck_len + 1


def make_repeat_previous(
    alphabet: int, k: int, deck_len: int, gamma: float = 0.95, cap: int = 100_000
) -> Pomdp:
    """Card-memory task.

    Cards are drawn i.i.d. uniformly from ``alphabet`` symbols and shown one
    per step, ``deck_len - 1`` cards per episode. A state holds the last ``k``
    cards (left-padded with symbol 0) and the number of cards shown so far.
    Once at least ``k`` cards were shown, the action is scored against the
    oldest card in the window: +1/(deck_len-k) when equal, -1/(deck_len-k)
    otherwise. That gives ``deck_len - k`` scored steps and a best return of 1.
    Observations are the card just shown; the reset state emits ``alphabet``.
    """
    if alphabet < 2 or k < 1 or deck_len < k + 1:
        raise ValueError(f"need alphabet >= 2, k >= 1 and deck_len >= k + 1, "
                         f"got ({alphabet}, {k}, {deck_len})")
    n_s = repeat_previous_size(alphabet, k, deck_len)
    if n_s - 1 > cap:
        raise CapacityError(f"Repeat-Previous({alphabet},{k},{deck_len}) needs {n_s} states, cap is {cap}")

    windows = list(itertools.product(range(alphabet), repeat=k))
    win_index = {w: i for i, w in enumerate(windows)}

    def sid(w, pos):
        return pos * len(windows) + win_index[w]

    reset = n_s - 1
    n_a, n_o = alphabet, alphabet + 1
    T = np.zeros((n_s, n_a, n_s))
    R = np.zeros((n_s, n_a))
    O = np.zeros((n_s, n_a, n_o))
    scale = 1.0 / (deck_len - k)
    for pos in range(deck_len):
        for w in windows:
            s = sid(w, pos)
            O[s, :, w[-1] if pos > 0 else 0] = 1.0
            if pos >= k:
                R[s, :] = -scale
                R[s, w[0]] = scale
            if pos == deck_len - 1:
                T[s, :, reset] = 1.0
            else:
                for card in range(alphabet):
                    T[s, :, sid(w[1:] + (card,), pos + 1)] += 1.0 / alphabet
    initial = sid((0,) * k, 0)
    T[reset, :, initial] = 1.0
    O[reset, :, alphabet] = 1.0
    p = Pomdp(T, R, O, gamma, initial, reset, alphabet,
              name=f"repeat-previous:{alphabet},{k},{deck_len}")
    report = validate(p)
    assert report.ok, report
    return p


def make_env(spec: str) -> Pomdp:
    """Built-in environment by name: ``tiger`` or ``repeat-previous:A,K,D``."""
    name, _, args = spec.partition(":")
    if name == "tiger":
        return make_tiger()
    if name in ("repeat-previous", "rp"):
        try:
            alphabet, k, deck_len = (int(x) for x in args.split(","))
        except ValueError:
            raise ValueError(f"expected repeat-previous:ALPHABET,K,DECK_LEN, got {spec!r}") from None
        return make_repeat_previous(alphabet, k, deck_len)
    raise KeyError(f"unknown built-in environment {spec!r}")


BUILTIN_ENVS = ("tiger", "repeat-previous:2,1,4", "repeat-previous:2,1,6", "repeat-previous:2,2,4")
