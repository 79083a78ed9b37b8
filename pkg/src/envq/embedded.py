"""Queue and environment observed just after departures, for exponential service.

With Poisson arrivals at constant rate ``lambda`` the departure-embedded
chain ``(X(tau_n), Y(tau_n))`` has stationary law ``xi(n) theta_hat(k)``,
where ``xi`` is the continuous-time level law and ``theta_hat`` is the
stationary vector of ``M0 R`` with ``M0 = lambda (lambda I_W - V)^-1 I_W``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from envq.ct_solver import LevelLaw, solve_product_form
from envq.env_core import ModelSpec, i_w
from envq.numerics import (
    EPS_RES,
    EPS_STOCH,
    check_flow_invertible,
    closed_classes,
    is_stochastic,
    period,
    solve_linear,
    stationary_of_stochastic,
)


class Disagreement(ArithmeticError):
    """Two routes to the same quantity disagree beyond tolerance."""


@dataclass(frozen=True)
class EmbeddedSolution:
    theta_hat: np.ndarray
    L: tuple
    inessential: tuple
    xi: LevelLaw
    theta: np.ndarray
    period: int
    diagnostics: dict = field(default_factory=dict)

    def pi_hat(self, n_max: int) -> np.ndarray:
        return np.outer(self.xi.head(n_max), self.theta_hat)


def _constant_lambda(model: ModelSpec) -> float:
    if not model.queue.constant_lambda:
        raise ValueError("departure-embedded analysis needs a constant arrival rate")
    return model.queue.lam[0]


def _resolvent(model: ModelSpec, shift: float) -> np.ndarray:
    """``(shift I_W - V)^-1 I_W`` after certifying invertibility."""
    env = model.env
    A = shift * i_w(env) - env.V
    verdict = check_flow_invertible(A, env.w_idx)
    if verdict.status == "flow_violated":
        raise ValueError(f"(shift I_W - V) not invertible: {verdict.reason} {verdict.witness}")
    return solve_linear(A, i_w(env))


def w_matrix(model: ModelSpec) -> np.ndarray:
    """Environment kernel from a departure leaving an empty system to the next arrival."""
    lam = _constant_lambda(model)
    W = lam * _resolvent(model, lam)
    if not is_stochastic(W, tol=EPS_STOCH):
        raise ValueError("W is not stochastic")
    return W



def u_matrices(model: ModelSpec, i: int, n_max: int | None = None, tol: float = 1e-12) -> list[np.ndarray]:
    """Kernels ``U^(i, n)``: start a service at level ``i``, see ``n`` arrivals before it ends.

    Entry ``(k, m)`` is the probability that exactly ``n`` arrivals occur and the
    service completes with the environment in ``m``, starting from ``k``.
    With ``n_max = None`` terms are produced until every row has residual mass
    below ``tol``.
    """
    lam = _constant_lambda(model)
    q = model.queue
    if i < 1:
        raise ValueError("level i must be >= 1")
    mu = q.mu_at(i)
    U = mu * _resolvent(model, lam + mu)
    out = [U]
    cache: dict[int, np.ndarray] = {}
    n = 0
    while True:
        if n_max is not None and n >= n_max:
            break
        if n_max is None:
            if (1.0 - sum(out).sum(axis=1)).max() < tol:
                break
        lvl = min(n + 1 + i, q.n_tail)
        if lvl not in cache:
            cache[lvl] = _resolvent(model, lam + q.mu_at(n + 1 + i))
        U = U @ ((lam / q.mu_at(n + i)) * q.mu_at(n + 1 + i) * cache[lvl])
        out.append(U)
        n += 1
        if n > 100000:
            raise RuntimeError("U series did not converge")
    return out


def m0_matrix(model: ModelSpec, check_levels: int = 5, tol: float = 1e-9) -> np.ndarray:
    """``M0 = lambda (lambda I_W - V)^-1 I_W`` with a numerical check of the level identity.

    The check asserts, for ``n = 0..check_levels``,
    ``W U^(1,n) + sum_{i=1}^{n+1} (prod_{j<=i} lambda/mu(j)) U^(i,n-i+1) = (prod_{i<=n} lambda/mu(i)) M0``.
    """
    M0 = w_matrix(model)
    if check_levels >= 0:
        residuals = level_identity_residuals(model, check_levels, M0)
        worst = max(residuals)
        if worst > tol:
            raise Disagreement(f"level identity residual {worst:.3e} exceeds {tol:g}")
    return M0


def level_identity_residuals(model: ModelSpec, n_levels: int, M0: np.ndarray | None = None) -> list[float]:
    lam = _constant_lambda(model)
    q = model.queue
    W = w_matrix(model) if M0 is None else M0
    U = {i: u_matrices(model, i, n_levels + 1) for i in range(1, n_levels + 2)}
    res = []
    for n in range(n_levels + 1):
        lhs = W @ U[1][n]
        for i in range(1, n + 2):
            lhs = lhs + np.prod([lam / q.mu_at(j) for j in range(1, i + 1)]) * U[i][n - i + 1]
        rhs = np.prod([lam / q.mu_at(j) for j in range(1, n + 1)]) * W
        res.append(float(np.abs(lhs - rhs).max()))
    return res


def reachable_after_departure(model: ModelSpec) -> np.ndarray:
    """Mask of ``L``: states reached in one ``R`` step from some non-blocking state."""
    env = model.env
    return (env.R[env.w_idx] > 0).any(axis=0)


def theta_hat_from_theta(model: ModelSpec, theta: np.ndarray) -> np.ndarray:
    """``theta I_W R`` normalized by the non-blocking mass."""
    env = model.env
    x = theta @ i_w(env) @ env.R
    mass = theta[env.w_idx].sum()
    if mass <= 0:
        raise ValueError("theta puts no mass on K_W")
    return x / mass


def theta_from_theta_hat(model: ModelSpec, theta_hat: np.ndarray, tol: float = EPS_RES) -> np.ndarray:
    """Invert the departure transform: ``theta ∝ theta_hat (I_W - V / lambda)^-1``."""
    env = model.env
    lam = _constant_lambda(model)
    A = i_w(env) - env.V / lam
    x = solve_linear(A.T, np.asarray(theta_hat, dtype=float))
    x = x / x.sum()
    # x solves theta (lambda I_W (R - I) + V) = 0
    res = float(np.abs(x @ (lam * i_w(env) @ (env.R - np.eye(env.size)) + env.V)).max())
    if res > tol * max(1.0, lam):
        raise Disagreement(f"recovered theta leaves residual {res:.3e}")
    return x


def solve_embedded(model: ModelSpec, tol: float = EPS_RES) -> EmbeddedSolution:
    """Departure-embedded product form, with ``theta_hat`` computed two ways."""
    ct = solve_product_form(model)
    if not ct.ok:
        raise ValueError(f"continuous-time model has no product form: {ct.verdict} {ct.reason}")
    env = model.env
    M0 = m0_matrix(model, check_levels=-1)
    P = M0 @ env.R
    via_chain = stationary_of_stochastic(P)
    via_theta = theta_hat_from_theta(model, ct.theta)
    gap = float(np.abs(via_chain - via_theta).max())
    if gap > tol:
        raise Disagreement(f"theta_hat routes differ by {gap:.3e}")
    L = reachable_after_departure(model)
    cls = closed_classes(P)[0]
    return EmbeddedSolution(
        theta_hat=via_chain,
        L=tuple(s for s, m in zip(env.states, L) if m),
        inessential=tuple(s for s, m in zip(env.states, L) if not m),
        xi=ct.xi,
        theta=ct.theta,
        period=period(P, cls),
        diagnostics={"route_gap": gap, "closed_class": tuple(env.states[i] for i in cls)},
    )
