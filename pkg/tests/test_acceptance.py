"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import time

import numpy as np
import pytest

from envq import models
from envq.ct_solver import direct_solve_truncated, solve_product_form, solve_product_form_finite, truncation_for
from envq.cli import example_matrix
from envq.embedded import m0_matrix, solve_embedded, theta_from_theta_hat, theta_hat_from_theta
from envq.env_core import EnvironmentSpec
from envq.mg1 import (
    HessenbergKernel,
    ServiceLaw,
    md1_inventory_counterexample,
    md1_stationary,
    mg1_product_form,
    solve_counterexample_chain,
)
from envq.models import MaintenanceSpec, PhaseLeadTimeSpec
from envq.numerics import Singular, check_flow_invertible, solve_linear, stationary_of_stochastic, total_variation
from envq.sim import simulate, within_standard_errors
from test_ct_solver import finite_reversible_model


def report(capsys, label, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} {label}: {detail}")
    assert ok, detail


def closed_form_models():
    """Builders with a closed-form environment law, as ``(name, model, theta)``."""
    out = []
    for r, S in [(0, 3), (2, 5)]:
        out.append((f"rs({r},{S})", *models.build_rs(r, S, 1.0, 2.0, 3.0)))
    out.append(("rs per-state nu", *models.build_rs(2, 4, 0.8, (2.0, 2.5), (0.7, 1.9, 2.2))))
    for r, Q in [(0, 2), (2, 3)]:
        out.append((f"rq({r},{Q})", *models.build_rq(r, Q, 1.0, 2.0, (3.0, 1.0, 2.0)[: r + 1])))
    for b in [(1.0,), (0.4, 0.6), (0.3, 0.2, 0.5)]:
        spec = PhaseLeadTimeSpec(2.0, b, 2, S=5)
        out.append((f"rs-phase L={len(b)}", *models.build_rs_phase(spec, 1.0, 2.0)))
    for N in range(5):
        out.append((f"tandem({N})", *models.build_tandem(N, 1.0, 2.0, [1.5 + 0.25 * k for k in range(N + 1)])))
    for N in (1, 5, 10):
        spec = MaintenanceSpec(1.0, 1.5, lambda k: 0.01 * k + 0.02, 0.3, 0.1, N=N)
        out.append((f"maintenance({N})", *models.build_maintenance(spec)))
    out.append(("sensor", *models.build_sensor_node(0.2, 2.0, 0.1, 0.4, 0.2, 0.5)))
    return out


def exponential_models():
    out = [(name, model) for name, model, _ in closed_form_models()]
    out.append(("rq-phase", models.build_rq_phase(PhaseLeadTimeSpec(2.0, (0.3, 0.2, 0.5), 1, Q=3), 1.0, 2.0)))
    out.append(("inventory-production", models.build_inventory_production(1, 4, 1.0, 2.0, 1.5)))
    return out


def test_criterion_01_counterexample(capsys):
    t0 = time.perf_counter()
    ce = md1_inventory_counterexample(1.0, 2.0, 3.0)
    elapsed = time.perf_counter() - t0
    ok = abs(ce.ratio_level0 - 0.122) <= 1e-3 and abs(ce.ratio_level1 - 0.145) <= 1e-3 and elapsed < 1.0
    report(capsys, "1 counterexample ratios", ok,
           f"level0={ce.ratio_level0:.6f} level1={ce.ratio_level1:.6f} time={elapsed:.3f}s")


def test_criterion_02_maintenance_optimum(capsys):
    results = []
    ok = True
    for slope, expected in [(0.01, 6), (0.001, 23)]:
        spec = MaintenanceSpec(1.0, 1.5, lambda k, c=slope: c * k, 0.3, 0.1, c_m=1.0, c_r=2.0, c_b=1.0)
        t0 = time.perf_counter()
        opt = models.optimize_maintenance(spec, range(1, 101))
        elapsed = time.perf_counter() - t0
        ok &= opt.N_star == expected and elapsed < 1.0
        results.append(f"slope {slope}: N*={opt.N_star} ({elapsed * 1e3:.1f} ms)")
    report(capsys, "2 maintenance optimum", ok, "; ".join(results))


def test_criterion_03_md1_closed_forms(capsys):
    worst = 0.0
    for rho in (0.1, 0.5, 0.9):
        xi = md1_stationary(rho, 1.0)
        e = np.exp(rho)
        expected = [(1 - rho), (1 - rho) * (e - 1), (1 - rho) * e * (e - rho - 1)]
        worst = max(worst, float(np.abs(xi[:3] - expected).max()))
    report(capsys, "3 M/D/1 closed forms", worst <= 1e-10, f"max error {worst:.2e}")


def test_criterion_04_product_form_vs_direct(capsys):
    t0 = time.perf_counter()
    worst, worst_name = 0.0, ""
    for name, model, theta in closed_form_models():
        sol = solve_product_form(model)
        assert sol.ok, name
        n = truncation_for(sol, 1e-9, minimum=2 * model.queue.n_tail + 5)
        assert sol.xi.tail_mass(n) < 1e-9
        pf = np.outer(sol.xi.head(n), theta)
        tv = total_variation(direct_solve_truncated(model, n), pf / pf.sum())
        if tv >= worst:
            worst, worst_name = tv, name
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 10.0
    report(capsys, "4 product form vs truncated CTMC", ok,
           f"max TV {worst:.2e} ({worst_name}), time {elapsed:.2f}s")


def test_criterion_05_embedded_consistency(capsys):
    route, level = 0.0, 0.0
    for name, model in exponential_models():
        a = stationary_of_stochastic(m0_matrix(model) @ model.env.R)
        sol = solve_embedded(model)
        b = theta_hat_from_theta(model, sol.theta)
        route = max(route, float(np.abs(a - b).max()))
        level = max(level, float(np.abs(sol.pi_hat(30).sum(axis=1) - sol.xi.head(30)).max()))
    ok = route <= 1e-10 and level <= 1e-10
    report(capsys, "5 embedded chain consistency", ok, f"route gap {route:.2e}, level gap {level:.2e}")


def test_criterion_06_round_trip(capsys):
    worst = 0.0
    for name, model in exponential_models():
        theta = solve_product_form(model).theta
        back = theta_from_theta_hat(model, theta_hat_from_theta(model, theta))
        worst = max(worst, float(np.abs(back - theta).max()))
    report(capsys, "6 theta round trip", worst <= 1e-10, f"max error {worst:.2e}")


def test_criterion_07_tensor_product(capsys):
    envs = [models.zero_lead_time_env(2, 6), models.zero_s_env(4, 1.3), models.vacation_env(0.5),
            EnvironmentSpec(("up",), frozenset(), [[0.0]], [[1.0]])]
    laws = [ServiceLaw.deterministic(0.8), ServiceLaw.erlang(3, 4.0), ServiceLaw.phase_mixture((0.5, 0.5), 3.0)]
    residual = max(mg1_product_form(HessenbergKernel.single(1.0, law), env).residual for env in envs for law in laws)
    rank_one = solve_counterexample_chain(1.0, 2.0, 3.0).rank_one_residual
    ok = residual <= 1e-8 and rank_one > 1e-3
    report(capsys, "7 tensor-product M/G/1", ok,
           f"max residual {residual:.2e}, counterexample rank-one residual {rank_one:.4f}")


def random_certifiable(rng, n, n_w):
    M = rng.normal(size=(n, n)) * (rng.random((n, n)) < 0.5)
    np.fill_diagonal(M, 0.0)
    for k in range(n_w, n):
        # a path from every blocking row towards a lower index, ending in K_W
        M[k, rng.integers(0, k)] = rng.uniform(0.5, 2.0) * rng.choice([-1.0, 1.0])
    off = np.abs(M).sum(axis=1)
    diag = off.copy()
    diag[:n_w] += rng.uniform(0.1, 2.0, n_w)
    diag[diag == 0] = 1.0
    np.fill_diagonal(M, diag * rng.choice([-1.0, 1.0], n))
    return M


def flow_violating(rng, n, n_w, n_trap):
    """A trap of ``n_trap`` blocking rows with edges only among themselves."""
    M = random_certifiable(rng, n, n_w)
    trap = np.arange(n - n_trap, n)
    rest = np.setdiff1d(np.arange(n), trap)
    M[np.ix_(trap, rest)] = 0.0
    for k in trap:
        M[k, k] = 0.0
        if n_trap > 1:
            M[k, trap[(np.flatnonzero(trap == k)[0] + 1) % n_trap]] = 1.0
        M[k, k] = -np.abs(M[k]).sum() if np.abs(M[k]).sum() else 0.0
    return M


def test_criterion_08_invertibility(capsys):
    M, w = example_matrix()
    example_ok = check_flow_invertible(M, w).certified
    rng = np.random.default_rng(2024)
    certified = solved = 0
    for _ in range(100):
        n = int(rng.integers(2, 10))
        n_w = int(rng.integers(1, n))
        A = random_certifiable(rng, n, n_w)
        if check_flow_invertible(A, range(n_w)).certified:
            certified += 1
            try:
                solve_linear(A, rng.normal(size=n))
                solved += 1
            except Singular:
                pass
    witnesses_ok = True
    for _ in range(30):
        n = int(rng.integers(3, 9))
        n_w = int(rng.integers(1, n - 1))
        n_trap = int(rng.integers(1, n - n_w + 1))
        B = flow_violating(rng, n, n_w, n_trap)
        v = check_flow_invertible(B, range(n_w))
        wit = list(v.witness)
        outside = [i for i in range(n) if i not in wit]
        witnesses_ok &= v.status == "flow_violated" and bool(wit) and np.abs(B[np.ix_(wit, outside)]).sum() == 0.0
    ok = example_ok and certified == 100 and solved == certified and witnesses_ok
    report(capsys, "8 invertibility certificate", ok,
           f"example certified={example_ok}, random {solved}/{certified} solved of 100, witnesses ok={witnesses_ok}")


def test_criterion_09_simulation(capsys):
    model, _ = models.build_rs(2, 5, 1.0, 2.0, 3.0)
    exact_sol = solve_product_form(model)
    t0 = time.perf_counter()
    est = simulate(model, 10**6, seed=1)
    elapsed = time.perf_counter() - t0
    again = simulate(model, 10**6, seed=1)
    deterministic = np.array_equal(est.occupancy, again.occupancy) and np.array_equal(
        est.departure_counts, again.departure_counts)
    levels = max(est.occupancy.shape[0], truncation_for(exact_sol, 1e-9))
    exact = exact_sol.pi(levels - 1)
    bad = within_standard_errors(est.occupancy, est.occupancy_se, exact, k=3.0, floor=1e-3)
    cells = int((exact > 1e-3).sum())
    ok = not bad.any() and deterministic and elapsed < 60.0
    report(capsys, "9 simulation agreement", ok,
           f"{cells - int(bad.sum())}/{cells} cells within 3 SE, deterministic={deterministic}, time {elapsed:.1f}s")


def test_criterion_10_insensitivity(capsys):
    mu_settings = [(2.0,), (5.0, 1.5, 3.0), (1.2, 9.0)]
    worst = 0.0
    for name, model, _ in closed_form_models():
        thetas = [solve_product_form(model.with_queue(mu=mu)).theta for mu in mu_settings]
        worst = max(worst, max(float(np.abs(t - thetas[0]).max()) for t in thetas))
    finite = [solve_product_form_finite(finite_reversible_model(lam, mu, 4))
              for lam, mu in [(1.0, 2.0), ((0.3, 2.0, 0.9), (4.0, 0.5)), ((5.0,), (0.2, 0.7, 1.3))]]
    finite_ok = all(s.ok for s in finite)
    finite_gap = max(float(np.abs(s.theta - finite[0].theta).max()) for s in finite)
    ok = worst <= 1e-10 and finite_ok and finite_gap <= 1e-10
    report(capsys, "10 insensitivity", ok, f"infinite max gap {worst:.2e}, finite max gap {finite_gap:.2e}")


def test_criterion_11_constant_failure_rate(capsys):
    rng = np.random.default_rng(11)
    uniform_sign = agree = 0
    for _ in range(20):
        lam, nu, nu_m, nu_r = rng.uniform(0.2, 3.0), rng.uniform(0.01, 1.0), rng.uniform(0.05, 2.0), rng.uniform(0.05, 2.0)
        c_m, c_r, c_b = rng.uniform(0.0, 5.0, 3)
        spec = MaintenanceSpec(lam, 1.0, nu, nu_m, nu_r, c_m=c_m, c_r=c_r, c_b=c_b)
        g = [models.maintenance_cost_exact(spec, N) for N in range(1, 52)]
        signs = {(b > a) - (b < a) for a, b in zip(g, g[1:])}
        uniform_sign += len(signs) == 1
        agree += signs == {models.constant_rate_trend(spec)}
    ok = uniform_sign == 20 and agree == 20
    report(capsys, "11 constant failure rate monotone", ok,
           f"{uniform_sign}/20 single-signed, {agree}/20 match predicted trend")
