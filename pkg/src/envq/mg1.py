"""M/G/1-type departure chains, the M/D/1 inventory counterexample, and interference-free environments.

At departure epochs an M/G/1 queue moves from level ``i >= 1`` to
``i + n - 1`` with probability ``p(i, n)``, the chance of ``n`` Poisson
arrivals during one service.  From level 0 it moves as from level 1.
The transition matrix is upper Hessenberg and its stationary vector is
computed here by a subtraction-free level-crossing recursion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse, stats

from envq.env_core import EnvironmentSpec, i_w
from envq.numerics import EPS_STOCH, closed_classes, gth, is_stochastic, solve_linear, stationary_of_stochastic


class NotErgodic(ValueError):
    pass


class ConstraintViolated(ValueError):
    pass


@dataclass(frozen=True)
class ServiceLaw:
    """Service requirement distribution with a closed-form Poisson mixture.

    ``kind`` is one of ``deterministic`` (params: d), ``exponential`` (rate),
    ``erlang`` (k, rate) and ``phase_mixture`` (weights b(1..L), rate beta):
    the last is the mixture of Erlang(l, beta) with weight b(l).
    """

    kind: str
    params: tuple

    @classmethod
    def deterministic(cls, d: float) -> "ServiceLaw":
        return cls("deterministic", (float(d),))

    @classmethod
    def exponential(cls, rate: float) -> "ServiceLaw":
        return cls("exponential", (float(rate),))

    @classmethod
    def erlang(cls, k: int, rate: float) -> "ServiceLaw":
        return cls("erlang", (int(k), float(rate)))

    @classmethod
    def phase_mixture(cls, weights: Sequence[float], beta: float) -> "ServiceLaw":
        return cls("phase_mixture", (tuple(float(w) for w in weights), float(beta)))

    def __post_init__(self):
        if self.kind == "deterministic":
            ok = self.params[0] > 0
        elif self.kind == "exponential":
            ok = self.params[0] > 0
        elif self.kind == "erlang":
            ok = self.params[0] >= 1 and self.params[1] > 0
        elif self.kind == "phase_mixture":
            w, beta = self.params
            ok = beta > 0 and min(w) >= 0 and abs(sum(w) - 1.0) <= 1e-12 and w[-1] > 0
        else:
            raise ValueError(f"unknown service law {self.kind!r}")
        if not ok:
            raise ValueError(f"invalid parameters for {self.kind}: {self.params}")

    @property
    def mean(self) -> float:
        if self.kind == "deterministic":
            return self.params[0]
        if self.kind == "exponential":
            return 1.0 / self.params[0]
        if self.kind == "erlang":
            return self.params[0] / self.params[1]
        w, beta = self.params
        return float(np.dot(np.arange(1, len(w) + 1), w) / beta)

    def _components(self, lam: float):
        """(weight, frozen distribution) pairs for the arrival count."""
        if self.kind == "deterministic":
            return [(1.0, stats.poisson(lam * self.params[0]))]
        if self.kind == "exponential":
            rate = self.params[0]
            return [(1.0, stats.nbinom(1, rate / (lam + rate)))]
        if self.kind == "erlang":
            k, rate = self.params
            return [(1.0, stats.nbinom(k, rate / (lam + rate)))]
        w, beta = self.params
        p = beta / (lam + beta)
        return [(wl, stats.nbinom(l, p)) for l, wl in enumerate(w, start=1) if wl > 0]

    def count_pmf(self, lam: float, n) -> np.ndarray:
        """P(n arrivals during one service) for Poisson arrivals at rate ``lam``."""
        n = np.asarray(n)
        return sum(w * d.pmf(n) for w, d in self._components(lam))

    def count_sf(self, lam: float, n) -> np.ndarray:
        """P(at least ``n`` arrivals during one service)."""
        n = np.asarray(n)
        return sum(w * d.sf(n - 1) for w, d in self._components(lam))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "deterministic":
            return np.full(size, self.params[0])
        if self.kind == "exponential":
            return rng.exponential(1.0 / self.params[0], size)
        if self.kind == "erlang":
            k, rate = self.params
            return rng.gamma(k, 1.0 / rate, size)
        w, beta = self.params
        shapes = rng.choice(np.arange(1, len(w) + 1), size=size, p=np.asarray(w))
        return rng.gamma(shapes, 1.0 / beta)


def poisson_mix(law: ServiceLaw, lam: float, n: int) -> float:
    """``p(n)``: probability of exactly ``n`` Poisson(``lam``) arrivals during one service."""
    return float(law.count_pmf(lam, n))


@dataclass(frozen=True)
class HessenbergKernel:
    """Rows ``p(i, .)`` for levels ``i = 1..len(laws)``; later levels reuse the last law."""

    lam: float
    laws: tuple

    @classmethod
    def single(cls, lam: float, law: ServiceLaw) -> "HessenbergKernel":
        return cls(float(lam), (law,))

    def law(self, i: int) -> ServiceLaw:
        return self.laws[min(max(i, 1), len(self.laws)) - 1]

    def p(self, i: int, n) -> np.ndarray:
        return self.law(i).count_pmf(self.lam, n)

    def qbar(self, i: int, m) -> np.ndarray:
        """P(at least ``m`` arrivals) for a service started at level ``i``."""
        return self.law(i).count_sf(self.lam, m)

    @property
    def tail_load(self) -> float:
        return self.lam * self.laws[-1].mean

    def matrix(self, n_trunc: int) -> np.ndarray:
        """Transition matrix on levels ``0..n_trunc`` with overflow folded into the top level."""
        N = n_trunc + 1
        P = np.zeros((N, N))
        for i in range(N):
            src = max(i, 1)
            lo = max(i - 1, 0)
            counts = np.arange(0, N - lo)
            P[i, lo:] = self.p(src, counts)
            P[i, -1] += float(self.qbar(src, N - lo))
        return P


def hessenberg_stationary(kernel: HessenbergKernel, mass_tol: float = 1e-12, n_limit: int = 200000) -> np.ndarray:
    """Stationary level law of the departure chain by level crossing.

    Balancing flow across the cut between ``<= n`` and ``>= n+1`` gives
    ``x(n+1) p(n+1,0) = x(0) qbar(1,n+1) + sum_{i=1..n} x(i) qbar(i, n+2-i)``;
    every term is nonnegative so no cancellation occurs.  The recursion
    stops when the remaining mass is below ``mass_tol``.
    """
    if kernel.tail_load >= 1.0:
        raise NotErgodic(f"load {kernel.tail_load:.4g} >= 1")
    i_tail = len(kernel.laws)
    size = 1024
    rows = {i: kernel.qbar(i, np.arange(size)) for i in range(1, i_tail + 1)}
    p0 = [float(kernel.p(i, 0)) for i in range(1, i_tail + 1)]
    x = np.zeros(size)
    x[0] = 1.0
    total = 1.0
    n = 0
    while True:
        if n + 2 >= size:
            size *= 2
            rows = {i: kernel.qbar(i, np.arange(size)) for i in rows}
            x = np.concatenate([x, np.zeros(x.size)])
        tail = rows[i_tail]
        flow = x[0] * rows[1][n + 1]
        for i in range(1, min(n, i_tail - 1) + 1):
            flow += x[i] * rows[i][n + 2 - i]
        if n >= i_tail:
            # levels >= i_tail share one row, so this part is a convolution
            flow += float(x[i_tail:n + 1] @ tail[n + 2 - np.arange(i_tail, n + 1)])
        x[n + 1] = flow / p0[min(n + 1, i_tail) - 1]
        total += x[n + 1]
        n += 1
        if n > i_tail + 2 and x[n - 1] > 0:
            decay = min(x[n] / x[n - 1], 1.0 - 1e-6)
            if x[n] * decay / (1.0 - decay) <= mass_tol * total:
                break
        if n >= n_limit:
            raise RuntimeError("level recursion did not converge")
    xi = x[:n + 1]
    return xi / xi.sum()


def md1_stationary(lam: float, mu: float, n_max: int | None = None) -> np.ndarray:
    """Departure-epoch level law of the M/D/1 queue with service time ``1/mu``."""
    if lam / mu >= 1.0:
        raise NotErgodic(f"rho = {lam / mu:.4g} >= 1")
    xi = hessenberg_stationary(HessenbergKernel.single(lam, ServiceLaw.deterministic(1.0 / mu)))
    if n_max is not None:
        out = np.zeros(n_max + 1)
        k = min(n_max + 1, xi.size)
        out[:k] = xi[:k]
        return out
    return xi


@dataclass(frozen=True)
class Counterexample:
    ratio_level0: float
    ratio_level1: float
    product_form_refuted: bool


def md1_inventory_counterexample(lam: float, mu: float, nu: float, tol: float = 1e-6) -> Counterexample:
    """The two values ``theta_hat(0)/theta_hat(1)`` a product form would need at levels 0 and 1.

    M/D/1 service ``1/mu`` with a lost-sales (r, S) = (1, 2) inventory and
    exponential lead time ``nu``.  Distinct values rule out a product form.
    """
    rho = lam / mu
    if rho >= 1.0:
        raise NotErgodic(f"rho = {rho:.4g} >= 1")
    a = lam / (nu + lam)
    e = np.exp(rho)
    scale = np.exp(-(lam + nu) / mu)
    r0 = scale * (a + e - 1.0)
    r1 = scale * (a * rho / (e - 1.0) + rho + e * (e - rho - 1.0) / (e - 1.0))
    return Counterexample(float(r0), float(r1), bool(abs(r0 - r1) > tol))


def counterexample_blocks(lam: float, mu: float, nu: float) -> tuple[np.ndarray, np.ndarray]:
    """Environment factors of the blocks ``A(n) = p(n) A`` and ``B(n) = p(n) B``, states ordered (2, 1, 0)."""
    stay = np.exp(-nu / mu)
    a = lam / (nu + lam)
    A = np.array([[0.0, 1.0, 0.0], [0.0, 1.0 - stay, stay], [0.0, 1.0, 0.0]])
    B = np.array([[0.0, 1.0, 0.0], [0.0, 1.0 - a * stay, a * stay], [0.0, 1.0, 0.0]])
    return A, B


def counterexample_chain(lam: float, mu: float, nu: float, n_trunc: int) -> np.ndarray:
    """Truncated departure chain of the counterexample on levels ``0..n_trunc`` times (2, 1, 0)."""
    A, B = counterexample_blocks(lam, mu, nu)
    Ptil = HessenbergKernel.single(lam, ServiceLaw.deterministic(1.0 / mu)).matrix(n_trunc)
    N = n_trunc + 1
    P = np.zeros((3 * N, 3 * N))
    for i in range(N):
        blk = B if i == 0 else A
        for j in range(N):
            if Ptil[i, j]:
                P[3 * i:3 * i + 3, 3 * j:3 * j + 3] = Ptil[i, j] * blk
    return P


@dataclass(frozen=True)
class CounterexampleSolve:
    pi_hat: np.ndarray  # (levels, 3) in environment order (2, 1, 0)
    marginal_gap: float
    rank_one_residual: float


def solve_counterexample_chain(lam: float, mu: float, nu: float, mass_tol: float = 1e-13) -> CounterexampleSolve:
    """Direct stationary solve plus the two diagnostics: level marginal and rank-one misfit."""
    xi = md1_stationary(lam, mu)
    n_trunc = xi.size + 10
    P = counterexample_chain(lam, mu, nu, n_trunc)
    pi = stationary_of_stochastic(P).reshape(n_trunc + 1, 3)
    k = min(xi.size, n_trunc + 1)
    gap = float(np.abs(pi.sum(axis=1)[:k] - xi[:k]).max())
    return CounterexampleSolve(pi, gap, rank_one_residual(pi))


def rank_one_residual(M: np.ndarray) -> float:
    """L1 distance from ``M`` to its best (Frobenius) rank-one approximation."""
    u, s, vt = np.linalg.svd(M, full_matrices=False)
    return float(np.abs(M - s[0] * np.outer(u[:, 0], vt[0])).sum())


def check_interference_free(env: EnvironmentSpec, tol: float = EPS_STOCH) -> None:
    """Raise :class:`ConstraintViolated` unless the environment only moves while blocked."""
    for k in env.w_idx:
        row = np.abs(env.V[k])
        if row.max() > tol:
            m = int(np.argmax(row))
            raise ConstraintViolated(
                f"v({env.states[k]!r},{env.states[m]!r}) = {env.V[k, m]:g} but K_W states must not move")
    for k in env.b_idx:
        if abs(env.V[k, k]) <= tol:
            raise ConstraintViolated(f"blocking state {env.states[k]!r} has v(k,k) = 0")


def h_matrix(env: EnvironmentSpec, tol: float = 1e-10) -> np.ndarray:
    """Environment step between consecutive departures: ``(I_W - V)^-1 I_W R``."""
    check_interference_free(env)
    n = env.size
    A = i_w(env) - env.V
    E = solve_linear(A, i_w(env))
    if np.abs(E @ E - E).max() > tol:
        raise ArithmeticError("(I_W - V)^-1 I_W is not idempotent")
    H = E @ env.R
    if not is_stochastic(H, tol=EPS_STOCH):
        raise ArithmeticError("H is not stochastic")
    return H


@dataclass(frozen=True)
class MG1Solution:
    xi_hat: np.ndarray
    theta_hat: np.ndarray
    pi_hat: np.ndarray
    residual: float
    diagnostics: dict = field(default_factory=dict)


def mg1_product_form(kernel: HessenbergKernel, env: EnvironmentSpec, verify: bool = True) -> MG1Solution:
    """Tensor-product departure law ``xi_hat x theta_hat`` for interference-free environments."""
    H = h_matrix(env)
    xi = hessenberg_stationary(kernel)
    theta = stationary_of_stochastic(H)
    pi = np.outer(xi, theta)
    res = float("nan")
    if verify:
        n_trunc = xi.size - 1
        P = sparse.kron(sparse.csr_matrix(kernel.matrix(n_trunc)), sparse.csr_matrix(H), format="csr")
        flat = pi.ravel()
        res = float(np.abs(P.T @ flat - flat).sum())
    cls = closed_classes(H)
    return MG1Solution(xi, theta, pi, res,
                       diagnostics={"levels": xi.size, "closed_class": tuple(env.states[i] for i in cls[0])})


def mg1_stationary_dense(kernel: HessenbergKernel, n_trunc: int) -> np.ndarray:
    """GTH solve of the truncated level chain (oracle for the recursion)."""
    return gth(kernel.matrix(n_trunc))
