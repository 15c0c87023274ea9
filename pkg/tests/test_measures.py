import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from beliefkit.measures import (
    SolverError, check_metric, discrete_metric, hamming_metric, kl, tv, wasserstein,
    wasserstein_discrete,
)

from oracles import transport_vertices


def _dist(n):
    return st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n).filter(lambda v: sum(v) > 1e-3).map(
        lambda v: np.array(v) / sum(v))


def test_kl_basics():
    assert kl([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert kl([1.0, 0.0], [0.0, 1.0]) == float("inf")
    assert kl([0.0, 1.0], [0.5, 0.5]) == pytest.approx(np.log(2))


def test_tv_basics():
    assert tv([1, 0], [0, 1]) == 1.0
    assert tv([0.2, 0.8], [0.2, 0.8]) == 0.0
    with pytest.raises(ValueError):
        tv([1.0], [0.5, 0.5])


def test_metrics_are_metrics():
    assert check_metric(discrete_metric(5)) == []
    assert check_metric(hamming_metric(8)) == []
    assert hamming_metric(4)[0, 3] == 2.0
    with pytest.raises(ValueError):
        hamming_metric(6)
    bad = np.array([[0.0, 1.0, 5.0], [1.0, 0.0, 1.0], [5.0, 1.0, 0.0]])
    assert check_metric(bad)


def test_wasserstein_coupling_marginals(rng):
    for _ in range(50):
        p, q = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        d = np.abs(rng.normal(size=(6, 6)))
        cost, plan = wasserstein(p, q, d)
        np.testing.assert_allclose(plan.sum(axis=1), p, atol=1e-10)
        np.testing.assert_allclose(plan.sum(axis=0), q, atol=1e-10)
        assert cost == pytest.approx(float(np.sum(plan * d)), abs=1e-12)


def test_wasserstein_matches_linear_program(rng):
    for n in (3, 5, 8):
        for _ in range(20):
            p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
            pts = rng.normal(size=(n, 2))
            d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
            A = np.vstack([np.kron(np.eye(n), np.ones(n)), np.kron(np.ones(n), np.eye(n))])
            lp = linprog(d.ravel(), A_eq=A, b_eq=np.concatenate([p, q]), method="highs")
            assert wasserstein(p, q, d)[0] == pytest.approx(lp.fun, abs=1e-9)


def test_wasserstein_vertex_oracle(rng):
    for n in (2, 3, 4):
        for _ in range(25):
            p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
            d = discrete_metric(n) if rng.random() < 0.3 else hamming_metric(4)[:n, :n]
            assert wasserstein(p, q, d)[0] == pytest.approx(transport_vertices(p, q, d), abs=1e-9)


def test_dirac_distance_is_ground_metric():
    d = hamming_metric(4)
    for i in range(4):
        for j in range(4):
            assert wasserstein(np.eye(4)[i], np.eye(4)[j], d)[0] == d[i, j]


def test_sparse_supports(rng):
    p = np.array([0.0, 0.5, 0.0, 0.5])
    q = np.array([1.0, 0.0, 0.0, 0.0])
    assert wasserstein(p, q, hamming_metric(4))[0] == pytest.approx(0.5 * 1 + 0.5 * 2)


def test_iteration_cap_is_reported(rng):
    p, q = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
    d = np.abs(rng.normal(size=(6, 6)))
    with pytest.raises(SolverError):
        wasserstein(p, q, d, max_iter=0)


@settings(max_examples=200, deadline=None)
@given(_dist(5), _dist(5))
def test_discrete_wasserstein_is_tv(p, q):
    assert wasserstein_discrete(p, q) == pytest.approx(tv(p, q), abs=1e-8)


@settings(max_examples=200, deadline=None)
@given(_dist(4), _dist(4))
def test_pinsker(p, q):
    k = kl(p, q)
    if np.isfinite(k):
        assert tv(p, q) <= np.sqrt(k / 2) + 1e-12


@settings(max_examples=100, deadline=None)
@given(_dist(4), _dist(4), _dist(4))
def test_triangle_inequality(p, q, r):
    d = hamming_metric(4)
    assert wasserstein(p, r, d)[0] <= wasserstein(p, q, d)[0] + wasserstein(q, r, d)[0] + 1e-9
