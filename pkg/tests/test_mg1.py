import time

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from envq import models
from envq.embedded import u_matrices
from envq.env_core import EnvironmentSpec, ModelSpec, QueueSpec
from envq.mg1 import (
    ConstraintViolated,
    HessenbergKernel,
    NotErgodic,
    ServiceLaw,
    counterexample_chain,
    h_matrix,
    hessenberg_stationary,
    md1_inventory_counterexample,
    md1_stationary,
    mg1_product_form,
    mg1_stationary_dense,
    poisson_mix,
    rank_one_residual,
    solve_counterexample_chain,
)


def test_poisson_mix_deterministic():
    lam, d = 1.7, 0.6
    law = ServiceLaw.deterministic(d)
    for n in range(6):
        assert poisson_mix(law, lam, n) == pytest.approx(stats.poisson.pmf(n, lam * d), rel=1e-14)


def test_poisson_mix_exponential_is_geometric():
    lam, mu = 1.0, 3.0
    law = ServiceLaw.exponential(mu)
    for n in range(6):
        assert poisson_mix(law, lam, n) == pytest.approx(mu / (lam + mu) * (lam / (lam + mu)) ** n, rel=1e-13)


@pytest.mark.parametrize("law", [
    ServiceLaw.erlang(3, 2.0),
    ServiceLaw.phase_mixture((0.3, 0.0, 0.7), 4.0),
    ServiceLaw.exponential(0.8),
])
def test_poisson_mix_matches_quadrature(law):
    lam = 1.3

    def density(t):
        if law.kind == "exponential":
            return stats.expon.pdf(t, scale=1 / law.params[0])
        if law.kind == "erlang":
            k, rate = law.params
            return stats.gamma.pdf(t, k, scale=1 / rate)
        w, beta = law.params
        return sum(b * stats.gamma.pdf(t, l + 1, scale=1 / beta) for l, b in enumerate(w))

    for n in range(5):
        val, _ = integrate.quad(lambda t: stats.poisson.pmf(n, lam * t) * density(t), 0, np.inf)
        assert poisson_mix(law, lam, n) == pytest.approx(val, abs=1e-10)


def test_count_pmf_sums_to_one_and_sf_consistent():
    law = ServiceLaw.phase_mixture((0.5, 0.25, 0.25), 2.0)
    n = np.arange(200)
    pmf = law.count_pmf(0.9, n)
    assert pmf.sum() == pytest.approx(1.0, abs=1e-13)
    assert np.allclose(law.count_sf(0.9, n), 1.0 - np.concatenate([[0.0], np.cumsum(pmf)[:-1]]), atol=1e-13)


def test_service_law_rejects_bad_parameters():
    with pytest.raises(ValueError):
        ServiceLaw.phase_mixture((0.5, 0.4), 1.0)
    with pytest.raises(ValueError):
        ServiceLaw.deterministic(0.0)


@pytest.mark.parametrize("rho", [0.1, 0.5, 0.9])
def test_md1_closed_forms(rho):
    xi = md1_stationary(rho, 1.0)
    e = np.exp(rho)
    assert xi[0] == pytest.approx(1 - rho, abs=1e-10)
    assert xi[1] == pytest.approx((1 - rho) * (e - 1), abs=1e-10)
    assert xi[2] == pytest.approx((1 - rho) * e * (e - rho - 1), abs=1e-10)
    assert xi.sum() == pytest.approx(1.0, abs=1e-11)


def test_md1_mean_matches_pollaczek_khinchine():
    rho = 0.7
    xi = md1_stationary(rho, 1.0)
    assert np.arange(xi.size) @ xi == pytest.approx(rho + rho ** 2 / (2 * (1 - rho)), rel=1e-9)


def test_md1_overload():
    with pytest.raises(NotErgodic):
        md1_stationary(2.0, 1.0)


def test_recursion_matches_dense_gth():
    kernel = HessenbergKernel(0.8, (ServiceLaw.exponential(3.0), ServiceLaw.erlang(2, 2.5),
                                    ServiceLaw.deterministic(0.9)))
    xi = hessenberg_stationary(kernel)
    dense = mg1_stationary_dense(kernel, xi.size + 40)
    assert np.abs(dense[:xi.size] - xi).max() <= 1e-11


def test_kernel_matrix_is_stochastic_hessenberg():
    P = HessenbergKernel.single(0.5, ServiceLaw.deterministic(1.0)).matrix(15)
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-14)
    assert np.count_nonzero(np.tril(P, -2)) == 0
    assert np.array_equal(P[0], P[1])


def test_counterexample_values():
    t0 = time.perf_counter()
    ce = md1_inventory_counterexample(1.0, 2.0, 3.0)
    assert time.perf_counter() - t0 < 1.0
    assert ce.ratio_level0 == pytest.approx(0.122, abs=1e-3)
    assert ce.ratio_level1 == pytest.approx(0.145, abs=1e-3)
    assert ce.product_form_refuted


def test_counterexample_ratios_from_balance_equations():
    lam, mu, nu = 1.0, 2.0, 3.0
    ce = md1_inventory_counterexample(lam, mu, nu)
    xi = md1_stationary(lam, mu)
    n = xi.size - 1
    P = counterexample_chain(lam, mu, nu, n)
    # inflow into (m, stock 0) from each environment state, weighted by the exact level law
    for m, expected in ((0, ce.ratio_level0), (1, ce.ratio_level1)):
        c = np.array([sum(xi[i] * P[3 * i + j, 3 * m + 2] for i in range(n + 1)) for j in range(3)])
        assert c[0] == 0.0 and c[2] == 0.0
        assert c[1] / xi[m] == pytest.approx(expected, rel=1e-9)


def test_counterexample_direct_solve():
    sol = solve_counterexample_chain(1.0, 2.0, 3.0)
    assert sol.marginal_gap <= 1e-10
    assert sol.rank_one_residual > 1e-3
    ratios = sol.pi_hat[:2, 2] / sol.pi_hat[:2, 1]
    assert abs(ratios[0] - ratios[1]) > 1e-3


def test_counterexample_fast_replenishment_limit():
    ce = md1_inventory_counterexample(1.0, 2.0, 1e3)
    assert ce.ratio_level0 == pytest.approx(0.0, abs=1e-12)
    assert ce.ratio_level1 == pytest.approx(0.0, abs=1e-12)


def test_counterexample_chain_stochastic():
    P = counterexample_chain(1.0, 2.0, 3.0, 20)
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-13)


def test_rank_one_residual_zero_for_outer_product():
    M = np.outer([0.5, 0.3, 0.2], [0.1, 0.9])
    assert rank_one_residual(M) <= 1e-15


def test_h_without_environment_moves_is_R():
    env = models.zero_lead_time_env(1, 5)
    assert np.allclose(h_matrix(env), env.R, atol=1e-15)


@pytest.mark.parametrize("S", [2, 4, 7])
def test_zero_reorder_h_is_uniform(S):
    env = models.zero_s_env(S, 0.7)
    H = h_matrix(env)
    assert np.allclose(H.sum(axis=1), 1.0, atol=1e-14)
    sol = mg1_product_form(HessenbergKernel.single(1.0, ServiceLaw.deterministic(0.5)), env)
    for k in range(S):
        assert sol.theta_hat[env.index(k)] == pytest.approx(1 / S, abs=1e-14)
    assert sol.theta_hat[env.index(S)] == 0.0


def test_interference_violation():
    model, _ = models.build_rs(1, 3, 1.0, 2.0, 1.0)
    with pytest.raises(ConstraintViolated):
        h_matrix(model.env)


def test_blocking_state_without_exit_violates():
    env = EnvironmentSpec((0, 1), frozenset({1}), np.zeros((2, 2)), [[0.0, 1.0], [0.0, 1.0]])
    with pytest.raises(ConstraintViolated):
        h_matrix(env)


@pytest.mark.parametrize("env", [
    models.zero_lead_time_env(2, 6),
    models.zero_s_env(4, 1.3),
    models.vacation_env(0.5),
    EnvironmentSpec(("up",), frozenset(), [[0.0]], [[1.0]]),
])
@pytest.mark.parametrize("law", [ServiceLaw.deterministic(0.8), ServiceLaw.erlang(2, 3.0)])
def test_tensor_product_residual(env, law):
    sol = mg1_product_form(HessenbergKernel.single(1.0, law), env)
    assert sol.residual <= 1e-8
    assert sol.pi_hat.sum() == pytest.approx(1.0, abs=1e-11)


def test_one_state_environment_reduces_to_level_chain():
    env = EnvironmentSpec(("up",), frozenset(), [[0.0]], [[1.0]])
    sol = mg1_product_form(HessenbergKernel.single(0.6, ServiceLaw.deterministic(1.0)), env)
    assert np.allclose(sol.pi_hat[:, 0], md1_stationary(0.6, 1.0), atol=1e-15)


def test_exponential_service_matches_continuous_time_kernel():
    lam, mu = 1.1, 2.7
    env = models.zero_s_env(3, 0.7)
    U = u_matrices(ModelSpec(QueueSpec.constant(lam, mu), env), 2, 5)
    H = h_matrix(env)
    law = ServiceLaw.exponential(mu)
    for n, u in enumerate(U):
        assert np.abs(u @ env.R - poisson_mix(law, lam, n) * H).max() <= 1e-12


@given(st.floats(0.05, 0.95), st.integers(1, 4), st.floats(0.5, 5.0))
def test_recursion_is_probability_vector(rho, k, rate):
    law = ServiceLaw.erlang(k, rate)
    lam = rho / law.mean
    xi = hessenberg_stationary(HessenbergKernel.single(lam, law))
    assert (xi >= 0).all()
    assert abs(xi.sum() - 1.0) <= 1e-11
    assert xi[0] == pytest.approx(1 - rho, abs=1e-9)
