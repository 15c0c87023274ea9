"""Discrepancy measures between finite distributions.

The Wasserstein distance is solved exactly with a transportation simplex
(northwest-corner start, MODI potentials, Bland's rule against cycling).
"""

from __future__ import annotations

from collections import deque

import numpy as np

SIMPLEX_TOL = 1e-9


class SolverError(RuntimeError):
    """The transportation simplex did not converge."""


def _pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.ndim != 1 or p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    return p, q


def check_distribution(p, tol: float = SIMPLEX_TOL) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > tol:
        raise ValueError(f"not a distribution: {p!r}")
    return p


def kl(p, q) -> float:
    """KL(p || q); +inf when p puts mass where q has none."""
    p, q = _pair(p, q)
    mask = p > 0
    if np.any(q[mask] <= 0):
        return float("inf")
    return max(float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask])))), 0.0)


def tv(p, q) -> float:
    p, q = _pair(p, q)
    return 0.5 * float(np.abs(p - q).sum())


def discrete_metric(n: int) -> np.ndarray:
    return 1.0 - np.eye(n)


def hamming_metric(n: int) -> np.ndarray:
    """Hamming distance between the binary codes of ``0..n-1`` (n a power of two)."""
    if n < 1 or n & (n - 1):
        raise ValueError(f"hamming metric needs a power of two, got {n}")
    idx = np.arange(n)
    x = idx[:, None] ^ idx[None, :]
    return np.vectorize(lambda v: bin(v).count("1"))(x).astype(float)


def check_metric(d, tol: float = 1e-9) -> list[str]:
    """Return the metric axioms that ``d`` violates."""
    d = np.asarray(d, dtype=float)
    problems = []
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        return [f"metric must be square, got {d.shape}"]
    if np.any(np.abs(np.diag(d)) > tol):
        problems.append("nonzero diagonal")
    if np.any(np.abs(d - d.T) > tol):
        problems.append("not symmetric")
    if np.any(d < -tol):
        problems.append("negative entries")
    via = (d[:, :, None] + d[None, :, :]).min(axis=1)
    if np.any(d > via + tol):
        problems.append("triangle inequality fails")
    return problems


def _northwest_corner(supply: np.ndarray, demand: np.ndarray) -> list[list]:
    s, d = supply.copy(), demand.copy()
    m, n = len(s), len(d)
    i = j = 0
    basis = []
    while True:
        x = min(s[i], d[j])
        basis.append([i, j, x])
        s[i] -= x
        d[j] -= x
        if i == m - 1 and j == n - 1:
            return basis
        if i == m - 1:
            j += 1
        elif j == n - 1 or s[i] <= d[j]:
            i += 1
        else:
            j += 1


def _potentials(basis, cost, m, n):
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    u[0] = 0.0
    rows = [[] for _ in range(m)]
    cols = [[] for _ in range(n)]
    for i, j, _ in basis:
        rows[i].append(j)
        cols[j].append(i)
    queue = deque([("r", 0)])
    while queue:
        kind, k = queue.popleft()
        if kind == "r":
            for j in rows[k]:
                if np.isnan(v[j]):
                    v[j] = cost[k, j] - u[k]
                    queue.append(("c", j))
        else:
            for i in cols[k]:
                if np.isnan(u[i]):
                    u[i] = cost[i, k] - v[k]
                    queue.append(("r", i))
    return u, v


def _cycle(basis, m, n, i_in, j_in) -> list[int]:
    """Basis positions on the tree path from column ``j_in`` to row ``i_in``."""
    adj: dict[tuple[str, int], list[tuple[tuple[str, int], int]]] = {}
    for pos, (i, j, _) in enumerate(basis):
        adj.setdefault(("r", i), []).append((("c", j), pos))
        adj.setdefault(("c", j), []).append((("r", i), pos))
    start, goal = ("c", j_in), ("r", i_in)
    parent = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nxt, pos in adj.get(node, ()):
            if nxt not in parent:
                parent[nxt] = (node, pos)
                queue.append(nxt)
    if goal not in parent:
        raise SolverError("basis is not a spanning tree")
    path = []
    node = goal
    while parent[node] is not None:
        node, pos = parent[node]
        path.append(pos)
    return path[::-1]


def _transport(supply, demand, cost, max_iter):
    m, n = len(supply), len(demand)
    basis = _northwest_corner(supply, demand)
    scale = max(1.0, float(np.abs(cost).max()))
    for _ in range(max_iter):
        u, v = _potentials(basis, cost, m, n)
        reduced = cost - u[:, None] - v[None, :]
        in_basis = np.zeros((m, n), dtype=bool)
        for i, j, _ in basis:
            in_basis[i, j] = True
        candidates = np.argwhere((reduced < -1e-12 * scale) & ~in_basis)
        if len(candidates) == 0:
            return basis
        i_in, j_in = (int(x) for x in candidates[0])
        path = _cycle(basis, m, n, i_in, j_in)
        minus = path[0::2]
        theta = min(basis[pos][2] for pos in minus)
        leave = min(
            (pos for pos in minus if basis[pos][2] <= theta + 1e-15),
            key=lambda pos: (basis[pos][0], basis[pos][1]),
        )
        for k, pos in enumerate(path):
            basis[pos][2] += -theta if k % 2 == 0 else theta
        basis[leave] = [i_in, j_in, theta]
    raise SolverError(f"transportation simplex hit the iteration cap ({max_iter})")


def wasserstein(p, q, d, max_iter: int | None = None) -> tuple[float, np.ndarray]:
    """Exact optimal transport cost between ``p`` and ``q`` under ground metric ``d``.

    Returns the cost and an optimal coupling with marginals ``p`` and ``q``.
    """
    p, q = _pair(p, q)
    d = np.asarray(d, dtype=float)
    if d.shape != (len(p), len(q)):
        raise ValueError(f"metric shape {d.shape} does not match {len(p)}x{len(q)}")
    rows = np.flatnonzero(p > 0)
    cols = np.flatnonzero(q > 0)
    coupling = np.zeros((len(p), len(q)))
    if len(rows) == 0 or len(cols) == 0:
        raise ValueError("distributions must have positive mass")
    supply = p[rows]
    demand = q[cols] * (supply.sum() / q[cols].sum())
    cost = d[np.ix_(rows, cols)]
    if max_iter is None:
        max_iter = 50 * (len(rows) + len(cols)) ** 2 + 1000
    for i, j, x in _transport(supply, demand, cost, max_iter):
        coupling[rows[i], cols[j]] += max(x, 0.0)
    residual = max(np.abs(coupling.sum(axis=1) - p).max(), np.abs(coupling.sum(axis=0) - q).max())
    if residual > 1e-8:
        raise SolverError(f"transport plan violates marginals by {residual:.3g}")
    return float(np.sum(coupling * d)), coupling


def wasserstein_discrete(p, q) -> float:
    """Wasserstein distance under the discrete metric (equal to total variation)."""
    p, q = _pair(p, q)
    return wasserstein(p, q, discrete_metric(len(p)))[0]
