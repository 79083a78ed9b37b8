"""Continuous-time analysis: reduced generators, product-form decision, truncated oracle.

The joint process ``(X, Y)`` has a product-form stationary law
``pi(n, k) = xi(n) theta(k)`` exactly when one strictly positive
probability vector ``theta`` annihilates every reduced generator
``lambda(n) I_W (R - I) + V``.  Because ``QueueSpec`` rates are constant
beyond ``n_tail``, the reduced generator only takes ``n_tail + 1``
distinct values, so checking ``n = 0..n_tail`` covers all levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from envq.env_core import ModelSpec, i_w
from envq.numerics import (
    EPS_STOCH,
    MultipleClosedClasses,
    is_generator,
    stationary_of_generator,
    total_variation,
)


@dataclass(frozen=True)
class LevelLaw:
    """Level distribution ``xi`` with an explicit head and a geometric tail.

    ``weights[n]`` holds the unnormalized ``prod_{i<n} lambda(i)/mu(i+1)``
    for ``n <= len(weights) - 1``; beyond that each level multiplies by
    ``ratio`` (zero for a finite level set).
    """

    weights: np.ndarray
    ratio: float
    C: float

    def pmf(self, n: int) -> float:
        last = len(self.weights) - 1
        if n <= last:
            return float(self.weights[n] / self.C)
        if self.ratio == 0.0:
            return 0.0
        return float(self.weights[-1] * self.ratio ** (n - last) / self.C)

    def head(self, n_max: int) -> np.ndarray:
        return np.array([self.pmf(n) for n in range(n_max + 1)])

    def tail_mass(self, n: int) -> float:
        """Probability of levels strictly above ``n``."""
        last = len(self.weights) - 1
        if self.ratio == 0.0:
            return float(self.weights[n + 1:].sum() / self.C) if n < last else 0.0
        if n < last:
            return float(self.weights[n + 1:].sum() / self.C + self.weights[-1] * self.ratio / (1 - self.ratio) / self.C)
        return self.pmf(n) * self.ratio / (1 - self.ratio)

    def mean(self) -> float:
        last = len(self.weights) - 1
        m = float(np.arange(last + 1) @ self.weights)
        if self.ratio:
            r, w = self.ratio, self.weights[-1]
            # sum_{j>=1} (last + j) w r^j
            m += w * (last * r / (1 - r) + r / (1 - r) ** 2)
        return m / self.C


@dataclass(frozen=True)
class ProductFormSolution:
    verdict: str  # "ProductForm" | "NotProductForm" | "NotErgodic"
    reason: str = ""
    xi: LevelLaw | None = None
    theta: np.ndarray | None = None
    C: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.verdict == "ProductForm"

    def pi(self, n_max: int) -> np.ndarray:
        """Joint law on levels ``0..n_max`` as an ``(n_max+1, |K|)`` array."""
        if not self.ok:
            raise ValueError(f"no product form: {self.verdict} {self.reason}")
        return np.outer(self.xi.head(n_max), self.theta)


@dataclass(frozen=True)
class TruncatedCTMC:
    n_trunc: int
    n_env: int
    Q: np.ndarray

    def index(self, n: int, k: int) -> int:
        return n * self.n_env + k


def q_tilde(model: ModelSpec, n: int) -> np.ndarray:
    """Reduced generator ``lambda(n) I_W (R - I) + V`` at level ``n``."""
    env = model.env
    lam = model.queue.lam_at(n)
    Qt = lam * i_w(env) @ (env.R - np.eye(env.size)) + env.V
    if not is_generator(Qt):
        raise ValueError(f"reduced generator at level {n} is not a generator")
    return Qt


def level_weights(model: ModelSpec) -> LevelLaw:
    """Unnormalized ``prod_{i<n} lambda(i)/mu(i+1)`` with closed geometric tail."""
    q = model.queue
    top = q.top_level
    last = q.n_tail if top is None else top
    w = np.ones(last + 1)
    for n in range(1, last + 1):
        w[n] = w[n - 1] * q.lam_at(n - 1) / q.mu_at(n)
    if top is not None:
        return LevelLaw(w, 0.0, float(w.sum()))
    rho = q.rho_tail
    if rho >= 1.0:
        return LevelLaw(w, rho, float("inf"))
    C = float(w[:-1].sum() + w[-1] / (1.0 - rho))
    return LevelLaw(w, rho, C)


def solve_product_form(model: ModelSpec, tol: float = EPS_STOCH) -> ProductFormSolution:
    """Decide product form for the infinite waiting room and return ``xi``, ``theta``, ``C``."""
    if model.queue.capacity is not None:
        raise ValueError("use solve_product_form_finite for finite capacity")
    try:
        theta = stationary_of_generator(q_tilde(model, 0))
    except MultipleClosedClasses as exc:
        return ProductFormSolution("NotProductForm", reason=f"theta Q~(0) = 0 has no unique solution: {exc}")
    diag = {"residuals": []}
    for n in range(0, model.queue.n_tail + 1):
        res = float(np.abs(theta @ q_tilde(model, n)).max())
        diag["residuals"].append(res)
        if res > tol:
            return ProductFormSolution("NotProductForm", reason=f"theta Q~({n}) residual {res:.3e} at level n={n}",
                                       theta=theta, diagnostics=diag)
    if (theta <= 0).any():
        bad = [model.env.states[i] for i in np.flatnonzero(theta <= 0)]
        return ProductFormSolution("NotProductForm", reason=f"theta not strictly positive at {bad}",
                                   theta=theta, diagnostics=diag)
    xi = level_weights(model)
    if not np.isfinite(xi.C):
        return ProductFormSolution("NotErgodic", reason=f"tail load {xi.ratio:.4g} >= 1 makes C diverge",
                                   theta=theta, diagnostics=diag)
    return ProductFormSolution("ProductForm", xi=xi, theta=theta, C=xi.C, diagnostics=diag)


def solve_product_form_finite(model: ModelSpec, tol: float = EPS_STOCH) -> ProductFormSolution:
    """Decide product form for a finite waiting room via the three environment conditions.

    (a) ``eta V = 0`` has a strictly positive stochastic solution,
    (b) no ``K_W`` row of ``R`` puts mass on ``K_B``,
    (c) ``eta`` restricted to ``K_W`` is invariant for ``R`` restricted to ``K_W``.
    """
    if model.queue.capacity is None:
        raise ValueError("model has infinite capacity")
    env = model.env
    w = env.w_idx
    failed = []
    leak = env.R[np.ix_(w, env.b_idx)].sum(axis=1) if env.b_idx.size else np.zeros(w.size)
    if (leak > tol).any():
        bad = [env.states[w[i]] for i in np.flatnonzero(leak > tol)]
        failed.append(f"K_W not closed under R: rows {bad} jump into K_B")
    eta = None
    try:
        eta = stationary_of_generator(env.V)
    except MultipleClosedClasses as exc:
        failed.append(f"eta V = 0 has no unique solution: {exc}")
    res = float("nan")
    if eta is not None:
        if (eta <= 0).any():
            bad = [env.states[i] for i in np.flatnonzero(eta <= 0)]
            failed.append(f"eta V = 0 solution not strictly positive at {bad}")
        eta_w = eta[w]
        res = float(np.abs(eta_w @ env.R[np.ix_(w, w)] - eta_w).max())
        if res > tol:
            failed.append(f"eta_W R_W != eta_W (residual {res:.3e})")
    if failed:
        return ProductFormSolution("NotProductForm", reason="; ".join(failed), theta=eta)
    xi = level_weights(model)
    return ProductFormSolution("ProductForm", xi=xi, theta=eta, C=xi.C, diagnostics={"eta_W_residual": res})


def truncated_ctmc(model: ModelSpec, n_trunc: int) -> TruncatedCTMC:
    """Generator of ``(X, Y)`` on levels ``0..n_trunc`` with arrivals dropped at the top level."""
    env, q = model.env, model.queue
    K = env.size
    w = env.w_mask
    N = n_trunc + 1
    Q = np.zeros((N * K, N * K))
    V_off = env.V - np.diag(np.diag(env.V))
    for n in range(N):
        blk = slice(n * K, (n + 1) * K)
        Q[blk, blk] += V_off
        if n < n_trunc:
            up = slice((n + 1) * K, (n + 2) * K)
            Q[blk, up] += np.diag(q.lam_at(n) * w)
        if n > 0:
            down = slice((n - 1) * K, n * K)
            Q[blk, down] += q.mu_at(n) * (w[:, None] * env.R)
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return TruncatedCTMC(n_trunc, K, Q)


def direct_solve_truncated(model: ModelSpec, n_trunc: int | None = None) -> np.ndarray:
    """Stationary law of the truncated chain as an ``(n_trunc+1, |K|)`` array.

    For a finite-capacity model with ``n_trunc = None`` the truncation is
    the model's own top level, so the result is exact.
    """
    if n_trunc is None:
        if model.queue.top_level is None:
            raise ValueError("n_trunc required for infinite capacity")
        n_trunc = model.queue.top_level
    chain = truncated_ctmc(model, n_trunc)
    pi = stationary_of_generator(chain.Q)
    return pi.reshape(n_trunc + 1, model.env.size)


def truncation_for(sol: ProductFormSolution, tail: float = 1e-9, minimum: int = 0) -> int:
    """Smallest level cap whose product-form tail mass is below ``tail``."""
    n = minimum
    while sol.xi.tail_mass(n) >= tail:
        n += 1
    return n


def compare_with_direct(model: ModelSpec, sol: ProductFormSolution, tail: float = 1e-9) -> float:
    """Total variation between the product form and the truncated direct solve."""
    if model.queue.top_level is not None:
        direct = direct_solve_truncated(model)
        return total_variation(direct, sol.pi(model.queue.top_level))
    n = truncation_for(sol, tail, minimum=2 * model.queue.n_tail + 5)
    direct = direct_solve_truncated(model, n)
    pf = sol.pi(n)
    return total_variation(direct, pf / pf.sum())
