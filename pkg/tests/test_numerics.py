import numpy as np
import pytest
from hypothesis import given, strategies as st

from envq.cli import example_matrix
from envq.numerics import (
    EPS_RES,
    FlowGraph,
    MultipleClosedClasses,
    Singular,
    check_flow_invertible,
    closed_classes,
    gth,
    period,
    solve_linear,
    stationary_of_generator,
    stationary_of_stochastic,
)


def test_symmetric_two_state_generator():
    nu = 2.5
    theta = stationary_of_generator(np.array([[-nu, nu], [nu, -nu]]))
    assert np.allclose(theta, [0.5, 0.5], atol=1e-15)


def test_two_state_state_dependent_rates():
    c, d = 0.7, 2.3
    theta = stationary_of_generator(np.array([[-c, c], [d, -d]]))
    assert np.allclose(theta, [d / (d + c), c / (d + c)], atol=1e-15)


def test_three_state_constant_lambda_generator():
    lam, nu = 1.3, 0.4
    G = np.array([[-nu, 0, nu], [lam, -(lam + nu), nu], [0, lam, -lam]])
    theta = stationary_of_generator(G)
    expected = np.array([lam / nu, 1.0, (lam + nu) / lam])
    assert np.allclose(theta, expected / expected.sum(), atol=1e-14)


def test_identity_is_ambiguous():
    with pytest.raises(MultipleClosedClasses) as info:
        stationary_of_stochastic(np.eye(2))
    assert len(info.value.classes) == 2


@pytest.mark.parametrize("S", [2, 5, 9])
def test_cyclic_permutation_uniform(S):
    P = np.roll(np.eye(S), 1, axis=1)
    assert np.allclose(stationary_of_stochastic(P), np.full(S, 1 / S), atol=1e-15)
    assert period(P, range(S)) == S


def test_transient_states_get_zero_mass():
    # state 2 leaks into the closed class {0, 1}
    P = np.array([[0.2, 0.8, 0.0], [0.6, 0.4, 0.0], [0.3, 0.3, 0.4]])
    theta = stationary_of_stochastic(P)
    assert theta[2] == 0.0
    assert np.allclose(theta[:2], [3 / 7, 4 / 7], atol=1e-15)
    assert [c.tolist() for c in closed_classes(P)] == [[0, 1]]


def test_gth_keeps_relative_accuracy_on_spread_rates():
    # birth-death chain with ratios 1e-8: exact answer is geometric
    eps = 1e-8
    n = 6
    G = np.zeros((n, n))
    for k in range(n - 1):
        G[k, k + 1] = eps
        G[k + 1, k] = 1.0
    np.fill_diagonal(G, -G.sum(axis=1))
    theta = gth(G)
    expected = eps ** np.arange(n)
    expected /= expected.sum()
    assert np.allclose(theta / expected, 1.0, rtol=1e-12)


@st.composite
def generators(draw):
    n = draw(st.integers(2, 7))
    rates = draw(st.lists(st.floats(0.05, 20.0), min_size=n * n, max_size=n * n))
    mask = draw(st.lists(st.booleans(), min_size=n * n, max_size=n * n))
    G = np.array(rates).reshape(n, n) * np.array(mask).reshape(n, n)
    # a cycle keeps the chain irreducible
    for k in range(n):
        G[k, (k + 1) % n] += 0.1
    np.fill_diagonal(G, 0.0)
    np.fill_diagonal(G, -G.sum(axis=1))
    return G


@given(generators())
def test_generator_stationary_residual(G):
    theta = stationary_of_generator(G)
    assert abs(theta.sum() - 1.0) < 1e-15
    assert (theta > 0).all()
    assert np.abs(theta @ G).max() <= EPS_RES * max(1.0, np.abs(G).max())


@given(generators())
def test_stochastic_route_agrees_with_generator_route(G):
    P = np.eye(len(G)) + G / (np.abs(np.diag(G)).max() * 1.01)
    assert np.allclose(stationary_of_stochastic(P), stationary_of_generator(G), atol=1e-12)


def test_flow_graph_edges():
    M, _ = example_matrix()
    g = FlowGraph.of(M)
    assert g.successors(3) == [2, 5]
    assert (2, 1) in g.edges


def test_example_matrix_certified():
    M, w = example_matrix()
    assert check_flow_invertible(M, w).certified
    x = solve_linear(M, np.arange(6.0))
    assert np.allclose(M @ x, np.arange(6.0))


def test_cut_off_blocking_states_give_witness_with_zero_outflow():
    M, w = example_matrix()
    # remove every edge leaving the blocking block towards K_W
    M[2, 1] = 0.0
    np.fill_diagonal(M, 0.0)
    M_b = M.copy()
    for k in range(2, 6):
        M_b[k, k] = -np.abs(M[k]).sum()
    M_b[0, 0], M_b[1, 1] = -1.0, -2.0
    verdict = check_flow_invertible(M_b, w)
    assert verdict.status == "flow_violated"
    witness = list(verdict.witness)
    assert set(witness) <= {2, 3, 4, 5}
    outside = [i for i in range(6) if i not in witness]
    assert np.abs(M_b[np.ix_(witness, outside)]).sum() == 0.0
    assert abs(np.linalg.det(M_b)) < 1e-12


def test_strictly_dominant_without_blocking():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(5, 5))
    np.fill_diagonal(A, np.abs(A).sum(axis=1) + 0.5)
    assert check_flow_invertible(A, range(5)).certified


def test_hypotheses_unmet_reports_reason():
    M = np.array([[1.0, 2.0], [0.0, 1.0]])
    verdict = check_flow_invertible(M, [0])
    assert verdict.status == "hypotheses_unmet"
    assert "dominant" in verdict.reason


def test_solve_linear_identity():
    b = np.array([1.0, -2.0, 3.5])
    assert np.array_equal(solve_linear(np.eye(3), b), b)


def test_solve_linear_rank_deficient():
    with pytest.raises(Singular):
        solve_linear(np.array([[1.0, 1.0], [1.0, 1.0]]), np.array([1.0, 0.0]))


def test_solve_linear_residual_random():
    rng = np.random.default_rng(7)
    A = rng.normal(size=(6, 6)) + 6 * np.eye(6)
    b = rng.normal(size=6)
    x = solve_linear(A, b)
    assert np.abs(A @ x - b).max() <= EPS_RES * (1 + np.abs(b).max())
