"""Builders for the application models and their closed-form stationary environment laws.

Every builder returns ``(model, theta)`` where ``theta`` is aligned with
``model.env.states`` (non-blocking states first), or just the model when
no closed form is available.  Rates given as a scalar are constant;
sequences are indexed by state as documented per builder.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import comb
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from envq.env_core import EnvironmentSpec, ModelSpec, QueueSpec


def _rates(x, n: int, name: str) -> np.ndarray:
    """Broadcast a scalar or validate a sequence of ``n`` positive rates."""
    arr = np.full(n, float(x)) if np.ndim(x) == 0 else np.asarray(x, dtype=float)
    if arr.shape != (n,):
        raise ValueError(f"{name} needs {n} values, got {arr.shape}")
    if (arr <= 0).any():
        raise ValueError(f"{name} must be strictly positive")
    return arr


def _queue(lam, mu, capacity=None) -> QueueSpec:
    return QueueSpec(tuple(np.atleast_1d(lam)), tuple(np.atleast_1d(mu)), capacity)


def _env(states: list, blocking: set, V_rates: dict, R_probs: dict) -> EnvironmentSpec:
    pos = {s: i for i, s in enumerate(states)}
    n = len(states)
    V = np.zeros((n, n))
    R = np.zeros((n, n))
    for (a, b), v in V_rates.items():
        V[pos[a], pos[b]] += v
    np.fill_diagonal(V, -V.sum(axis=1))
    for (a, b), p in R_probs.items():
        R[pos[a], pos[b]] += p
    return EnvironmentSpec(tuple(states), frozenset(blocking), V, R)


def _aligned(env: EnvironmentSpec, values: dict) -> np.ndarray:
    vec = env.vector(values)
    return vec / vec.sum()


def _lam0(lam) -> float:
    return float(np.atleast_1d(lam)[0])


# ---------------------------------------------------------------- lost sales, exponential lead time

def build_rs(r: int, S: int, lam, mu, nu) -> tuple[ModelSpec, np.ndarray]:
    """(r, S) lost-sales inventory feeding an M/M/1 server.

    States are stock levels ``0..S``; stock 0 blocks.  Each departure uses
    one item.  While stock ``k <= r`` a replenishment arrives at rate
    ``nu[k]`` and raises the stock to ``S``.
    """
    if not 0 <= r < S:
        raise ValueError("need 0 <= r < S")
    nu = _rates(nu, r + 1, "nu")
    V = {(k, S): nu[k] for k in range(r + 1)}
    R = {(0, 0): 1.0, **{(k, k - 1): 1.0 for k in range(1, S + 1)}}
    env = _env(list(range(S + 1)), {0}, V, R)
    lam0 = _lam0(lam)
    # stock k+1 is entered from k only by a departure: theta(k+1) lam = theta(k) (lam + nu_k)
    theta = {0: lam0 / nu[0], 1: 1.0}
    for k in range(1, S):
        theta[k + 1] = theta[k] * ((lam0 + nu[k]) / lam0 if k <= r else 1.0)
    return ModelSpec(_queue(lam, mu), env, f"rs({r},{S})"), _aligned(env, theta)


def build_rq(r: int, Q: int, lam, mu, nu) -> tuple[ModelSpec, np.ndarray]:
    """(r, Q) lost-sales inventory: at stock ``k <= r`` an order of ``Q`` items arrives at rate ``nu[k]``."""
    if not 0 <= r < Q:
        raise ValueError("need 0 <= r < Q")
    nu = _rates(nu, r + 1, "nu")
    top = r + Q
    V = {(k, k + Q): nu[k] for k in range(r + 1)}
    R = {(0, 0): 1.0, **{(k, k - 1): 1.0 for k in range(1, top + 1)}}
    env = _env(list(range(top + 1)), {0}, V, R)
    lam0 = _lam0(lam)
    growth = [1.0, 1.0]  # growth[k] = prod_{i=1}^{k-1} (lam + nu_i) / lam
    for k in range(1, r + 1):
        growth.append(growth[-1] * (lam0 + nu[k]) / lam0)
    peak = growth[r + 1]
    theta = {0: lam0 / nu[0]}
    for k in range(1, r + 2):
        theta[k] = growth[k]
    for k in range(r + 1, Q + 1):
        theta[k] = peak
    for k in range(1, r + 1):
        theta[k + Q] = peak - growth[k]
    return ModelSpec(_queue(lam, mu), env, f"rq({r},{Q})"), _aligned(env, theta)


# ---------------------------------------------------------------- phase-type lead times

@dataclass(frozen=True)
class PhaseLeadTimeSpec:
    """Lead time is Erlang(l, beta) with probability ``b[l-1]``, ``l = 1..len(b)``.

    ``S`` is the order-up-to level for (r, S) and ``Q`` the order size for (r, Q).
    """

    beta: float
    b: tuple
    r: int
    S: int | None = None
    Q: int | None = None

    def __post_init__(self):
        b = tuple(float(x) for x in self.b)
        object.__setattr__(self, "b", b)
        if self.beta <= 0 or min(b) < 0 or b[-1] <= 0 or abs(sum(b) - 1.0) > 1e-12:
            raise ValueError("need beta > 0, b >= 0 summing to 1 with b(L) > 0")
        if self.r < 0 or (self.S is None) == (self.Q is None):
            raise ValueError("need r >= 0 and exactly one of S, Q")
        if self.S is not None and not self.r < self.S:
            raise ValueError("need r < S")
        if self.Q is not None and not self.r < self.Q:
            raise ValueError("need r < Q")

    @property
    def phases(self) -> int:
        return len(self.b)

    @property
    def mean_phases(self) -> float:
        return float(np.dot(np.arange(1, self.phases + 1), self.b))


def _phase_env(spec: PhaseLeadTimeSpec, top: int, refill: Callable[[int], int]) -> EnvironmentSpec:
    r, L, beta = spec.r, spec.phases, spec.beta
    outstanding = [(j, l) for j in range(r + 1) for l in range(L, 0, -1)]
    states = list(range(r + 1, top + 1)) + outstanding
    V, R = {}, {}
    for k in range(r + 2, top + 1):
        R[(k, k - 1)] = 1.0
    for l in range(1, L + 1):
        if spec.b[l - 1] > 0:
            R[(r + 1, (r, l))] = spec.b[l - 1]
    for j, l in outstanding:
        R[((j, l), (j - 1, l) if j >= 1 else (j, l))] = 1.0
        if l >= 2:
            V[((j, l), (j, l - 1))] = beta
        else:
            V[((j, 1), refill(j))] = beta
    return _env(states, {(0, l) for l in range(1, L + 1)}, V, R)


def phase_rs_theta(spec: PhaseLeadTimeSpec, lam: float) -> dict:
    """Closed-form unnormalized environment law of the phase-type (r, S) model."""
    r, L, beta, b = spec.r, spec.phases, spec.beta, spec.b
    grow = (lam + beta) / lam
    p = beta / (lam + beta)
    tail = np.cumsum(np.asarray(b)[::-1])[::-1]  # tail[i-1] = sum_{g >= i} b(g)
    theta = {}
    for k in range(r + 1, spec.S + 1):
        theta[k] = grow ** r
    for l in range(1, L + 1):
        if r == 0:
            theta[(0, l)] = lam / beta * tail[l - 1]
            continue
        for j in range(1, r + 1):
            theta[(j, l)] = grow ** (j - 1) * sum(
                b[i - 1] * p ** (i - l) * comb(i - l + r - j, r - j) for i in range(l, L + 1))
        theta[(0, l)] = lam / beta * sum(
            tail[i - 1] * p ** (i - l) * comb(i - l + r - 1, r - 1) for i in range(l, L + 1))
    return theta


def build_rs_phase(spec: PhaseLeadTimeSpec, lam, mu) -> tuple[ModelSpec, np.ndarray]:
    """(r, S) lost-sales inventory with a mixed-Erlang lead time.

    Stock above ``r`` is a plain state.  At stock ``j <= r`` an order is
    outstanding and ``(j, l)`` records the ``l`` remaining lead-time phases;
    completing the last phase refills the stock to ``S``.
    """
    if spec.S is None:
        raise ValueError("build_rs_phase needs S")
    env = _phase_env(spec, spec.S, lambda j: spec.S)
    theta = phase_rs_theta(spec, _lam0(lam))
    return ModelSpec(_queue(lam, mu), env, f"rs_phase({spec.r},{spec.S})"), _aligned(env, theta)


def build_rq_phase(spec: PhaseLeadTimeSpec, lam, mu) -> ModelSpec:
    """(r, Q) lost-sales inventory with a mixed-Erlang lead time; delivery adds ``Q`` items."""
    if spec.Q is None:
        raise ValueError("build_rq_phase needs Q")
    env = _phase_env(spec, spec.r + spec.Q, lambda j: j + spec.Q)
    return ModelSpec(_queue(lam, mu), env, f"rq_phase({spec.r},{spec.Q})")


def inventory_marginals(spec: PhaseLeadTimeSpec, lam: float) -> np.ndarray:
    """Stock-level law ``P(I = j)``, ``j = 0..S``, via negative-binomial race probabilities.

    ``W(u, a)`` counts lead-time phases completed before ``u`` demands when a
    demand wins each race with probability ``a = lam / (lam + beta)``.
    ``U`` is the number of lead-time phases and ``U_e`` its equilibrium version.
    """
    r, S, L, beta = spec.r, spec.S, spec.phases, spec.beta
    a = lam / (lam + beta)
    b = np.asarray(spec.b)
    support = np.arange(1, L + 1)
    eq = np.cumsum(b[::-1])[::-1] / spec.mean_phases  # P(U_e = i)
    grow = ((lam + beta) / lam) ** r

    def race(u: int, weights: np.ndarray) -> float:
        # P(W(u, a) < U) = sum_i P(U = i) P(W <= i - 1)
        return float(weights @ stats.nbinom(u, a).cdf(support - 1))

    out = np.zeros(S + 1)
    out[r + 1:] = grow
    for j in range(1, r + 1):
        out[j] = grow * race(r + 1 - j, b)
    out[0] = lam / beta * spec.mean_phases * grow * (race(r, eq) if r >= 1 else 1.0)
    return out / out.sum()


def stock_marginal(model: ModelSpec, theta: np.ndarray, S: int) -> np.ndarray:
    """Sum a phase-model environment law over phases to get ``P(I = j)``."""
    out = np.zeros(S + 1)
    for s, v in zip(model.env.states, theta):
        out[s[0] if isinstance(s, tuple) else s] += v
    return out


# ---------------------------------------------------------------- availability models

def build_unreliable(env: EnvironmentSpec, lam, mu, name: str = "unreliable") -> ModelSpec:
    """Server whose availability follows ``env``: it stops completely while ``env`` blocks."""
    return ModelSpec(_queue(lam, mu), env, name)


def build_sensor_node(lam, mu, alpha: float, beta: float, a: float, s: float) -> tuple[ModelSpec, np.ndarray]:
    """Node that serves only while active (``A``) and switched on (``1``).

    On/off: ``1 -> 0`` at ``alpha``, ``0 -> 1`` at ``beta``.  Active/sleep:
    ``A -> S`` at ``a``, ``S -> A`` at ``s``.  The two switches are independent
    and departures do not affect them.
    """
    states = [(m, o) for m in ("A", "S") for o in (1, 0)]
    V = {}
    for m in ("A", "S"):
        V[((m, 1), (m, 0))] = alpha
        V[((m, 0), (m, 1))] = beta
    for o in (0, 1):
        V[(("A", o), ("S", o))] = a
        V[(("S", o), ("A", o))] = s
    R = {(k, k): 1.0 for k in states}
    env = _env(states, set(states) - {("A", 1)}, V, R)
    on = {1: beta / (alpha + beta), 0: alpha / (alpha + beta)}
    act = {"A": s / (a + s), "S": a / (a + s)}
    theta = {(m, o): act[m] * on[o] for m, o in states}
    return ModelSpec(_queue(lam, mu), env, "sensor"), _aligned(env, theta)


def build_tandem(N: int, lam, mu, nu) -> tuple[ModelSpec, np.ndarray]:
    """First station of a tandem line whose second station has buffer ``N``.

    The environment is the second station's content ``0..N+1``; a full buffer
    ``N+1`` blocks the first server.  ``nu[k-1]`` is the second station's
    service rate with ``k`` items present, ``k = 1..N+1``.
    """
    if N < 0:
        raise ValueError("N >= 0")
    nu = _rates(nu, N + 1, "nu")
    V = {(k, k - 1): nu[k - 1] for k in range(1, N + 2)}
    R = {(k, k + 1): 1.0 for k in range(N + 1)}
    R[(N + 1, N + 1)] = 1.0
    env = _env(list(range(N + 2)), {N + 1}, V, R)
    lam0 = _lam0(lam)
    theta = {0: 1.0}
    for k in range(1, N + 2):
        theta[k] = theta[k - 1] * lam0 / nu[k - 1]
    return ModelSpec(_queue(lam, mu), env, f"tandem({N})"), _aligned(env, theta)


def build_inventory_production(r: int, S: int, lam, mu, nu: float) -> ModelSpec:
    """(r, S) inventory refilled one item at a time by a second production process.

    Production (rate ``nu`` per item) is on at stock ``<= r``, off at ``S``,
    and above ``r`` the flag in ``(k, flag)`` records whether it is running.
    No closed form is known; use the solver.
    """
    if not 0 <= r < S:
        raise ValueError("need 0 <= r < S")
    mid = [(k, f) for k in range(r + 1, S) for f in (0, 1)]
    states = list(range(r + 1)) + [S] + mid

    def up(k):
        return S if k + 1 == S else (k + 1 if k + 1 <= r else (k + 1, 1))

    V = {(k, up(k)): nu for k in range(r + 1)}
    for k in range(r + 1, S):
        V[((k, 1), up(k))] = nu
    R = {(0, 0): 1.0}
    for k in range(1, r + 1):
        R[(k, k - 1)] = 1.0
    R[(S, r if S - 1 == r else (S - 1, 0))] = 1.0
    for k, f in mid:
        R[((k, f), k - 1 if k - 1 <= r else (k - 1, f))] = 1.0
    return ModelSpec(_queue(lam, mu), _env(states, {0}, V, R), f"inventory_production({r},{S})")


# ---------------------------------------------------------------- maintenance

@dataclass(frozen=True)
class MaintenanceSpec:
    """Server with preventive maintenance after ``N`` services.

    ``nu`` gives the breakdown rate after ``k`` services (scalar, sequence
    indexed by ``k``, or callable).  Breakdowns lead to repair (``b_r``, rate
    ``nu_r``); after the ``N``-th service the server goes to maintenance
    (``b_m``, rate ``nu_m``).  Costs are per unit time: ``c_b`` while down,
    ``c_m`` / ``c_r`` on top in maintenance / repair, ``c_w`` per waiting customer.
    """

    lam: float
    mu: float
    nu: object
    nu_m: float
    nu_r: float
    c_m: float = 0.0
    c_r: float = 0.0
    c_b: float = 0.0
    c_w: float = 0.0
    N: int = 1

    def nu_at(self, k: int) -> float:
        if callable(self.nu):
            return float(self.nu(k))
        if np.ndim(self.nu) == 0:
            return float(self.nu)
        return float(self.nu[k])

    def with_N(self, N: int) -> "MaintenanceSpec":
        return MaintenanceSpec(self.lam, self.mu, self.nu, self.nu_m, self.nu_r,
                               self.c_m, self.c_r, self.c_b, self.c_w, N)


MAINT, REPAIR = "b_m", "b_r"


def build_maintenance(spec: MaintenanceSpec) -> tuple[ModelSpec, np.ndarray]:
    N, lam = spec.N, spec.lam
    if N < 1:
        raise ValueError("N >= 1")
    if min(spec.lam, spec.mu, spec.nu_m, spec.nu_r) <= 0:
        raise ValueError("rates must be positive")
    states = list(range(N)) + [MAINT, REPAIR]
    V = {(k, REPAIR): spec.nu_at(k) for k in range(N) if spec.nu_at(k) > 0}
    V[(MAINT, 0)] = spec.nu_m
    V[(REPAIR, 0)] = spec.nu_r
    R = {(k, k + 1): 1.0 for k in range(N - 1)}
    R[(N - 1, MAINT)] = 1.0
    R[(MAINT, MAINT)] = 1.0
    R[(REPAIR, REPAIR)] = 1.0
    env = _env(states, {MAINT, REPAIR}, V, R)
    return ModelSpec(_queue(lam, spec.mu), env, f"maintenance({N})"), _aligned(env, maintenance_theta(spec))


def maintenance_theta(spec: MaintenanceSpec) -> dict:
    """Unnormalized closed form: ``theta(k) = prod_{i<=k} lam/(nu_i+lam)``, ``theta(0) = 1``."""
    lam, N = spec.lam, spec.N
    theta = {0: 1.0}
    for k in range(1, N):
        theta[k] = theta[k - 1] * lam / (spec.nu_at(k) + lam)
    theta[MAINT] = lam / spec.nu_m * theta[N - 1]
    theta[REPAIR] = ((spec.nu_at(0) + lam) - lam * theta[N - 1]) / spec.nu_r
    return theta


def maintenance_cost_curve(spec: MaintenanceSpec, N_values: Sequence[int]) -> np.ndarray:
    """``g(N) = (c_b + c_m) theta_N(b_m) + (c_b + c_r) theta_N(b_r)`` for each ``N``.

    The unnormalized counter weights do not depend on ``N``, so one prefix
    product serves the whole curve.
    """
    N_values = np.asarray(N_values, dtype=int)
    lam = spec.lam
    n_max = int(N_values.max())
    a = np.array([lam / (spec.nu_at(k) + lam) for k in range(1, n_max)])
    w = np.concatenate([[1.0], np.cumprod(a)])
    head = np.cumsum(w)
    last = w[N_values - 1]
    t_m = lam / spec.nu_m * last
    t_r = ((spec.nu_at(0) + lam) - lam * last) / spec.nu_r
    total = head[N_values - 1] + t_m + t_r
    return ((spec.c_b + spec.c_m) * t_m + (spec.c_b + spec.c_r) * t_r) / total


def maintenance_cost_exact(spec: MaintenanceSpec, N: int) -> Fraction:
    """``g(N)`` in exact rational arithmetic from the float parameters."""
    lam = Fraction(spec.lam)
    nu = [Fraction(spec.nu_at(k)) for k in range(N)]
    w = [Fraction(1)]
    for k in range(1, N):
        w.append(w[-1] * lam / (nu[k] + lam))
    t_m = lam / Fraction(spec.nu_m) * w[-1]
    t_r = ((nu[0] + lam) - lam * w[-1]) / Fraction(spec.nu_r)
    total = sum(w) + t_m + t_r
    return ((Fraction(spec.c_b) + Fraction(spec.c_m)) * t_m + (Fraction(spec.c_b) + Fraction(spec.c_r)) * t_r) / total


def constant_rate_trend(spec: MaintenanceSpec) -> int:
    """Sign of ``g(N+1) - g(N)`` (the same for every ``N``) when the breakdown rate is constant.

    Returns +1 (increasing), -1 (decreasing) or 0 (constant).
    """
    lam, nu, nm, nr = spec.lam, spec.nu_at(0), spec.nu_m, spec.nu_r
    a = lam / (nu + lam)
    bracket = (spec.c_b + spec.c_m) * lam * (
        -a * a * nu + 2 * a * nu - nu + a * nr - nr - lam * a * a + 2 * lam * a - lam
    ) + (spec.c_b + spec.c_r) * (
        a * a * nm * nu - a * nm * nu + lam * a * a * nu - 2 * lam * a * nu + lam * nu
        + lam * a * a * nm - 2 * lam * a * nm + lam * nm + lam * lam * a * a - 2 * lam * lam * a + lam * lam
    )
    scale = max(1.0, abs(spec.c_b) + abs(spec.c_m) + abs(spec.c_r)) * max(1.0, lam, nu, nm, nr) ** 3
    if abs(bracket) <= 1e-13 * scale:
        return 0
    return 1 if bracket > 0 else -1


@dataclass(frozen=True)
class MaintenanceOptimum:
    N_star: int
    N: np.ndarray
    g: np.ndarray
    trend: int | None = None


def optimize_maintenance(spec: MaintenanceSpec, N_range: Sequence[int] = range(1, 101)) -> MaintenanceOptimum:
    """Threshold minimizing ``g`` over ``N_range`` (smallest ``N`` on ties)."""
    N = np.asarray(list(N_range), dtype=int)
    if N.size == 0:
        raise ValueError("empty N range")
    g = maintenance_cost_curve(spec, N)
    best = int(N[np.flatnonzero(g == g.min())[0]])
    constant = not callable(spec.nu) and np.ndim(spec.nu) == 0
    return MaintenanceOptimum(best, N, g, constant_rate_trend(spec) if constant else None)


def maintenance_average_cost(spec: MaintenanceSpec) -> float:
    """Full long-run cost: ``g(N)`` plus the ``N``-independent waiting cost ``c_w E[X]``."""
    from envq.ct_solver import level_weights

    model, _ = build_maintenance(spec)
    g = float(maintenance_cost_curve(spec, [spec.N])[0])
    return g + spec.c_w * level_weights(model).mean()


# ---------------------------------------------------------------- departure-epoch closed forms

def _growth(lam: float, nu: np.ndarray, r: int, literal_exponent: bool) -> list[float]:
    """``P_k = prod_{i=1}^k (lam + nu_i)/lam`` for ``k = 0..r`` (optionally with exponent ``i``)."""
    P = [1.0]
    for i in range(1, r + 1):
        f = (lam + nu[i]) / lam
        P.append(P[-1] * (f ** i if literal_exponent else f))
    return P


def embedded_rs_theta_hat(r: int, S: int, lam: float, nu, literal_exponent: bool = False) -> np.ndarray:
    """Departure-epoch environment law of the (r, S) model, aligned with ``build_rs`` states.

    ``literal_exponent`` raises the ``i``-th factor to the power ``i``; the
    solver shows that variant is not the stationary law.
    """
    nu = _rates(nu, r + 1, "nu")
    env = build_rs(r, S, lam, 1.0, nu)[0].env
    P = _growth(lam, nu, r, literal_exponent)
    values = {k: P[min(k, r)] for k in range(S)}
    values[S] = 0.0
    return _aligned(env, values)


def embedded_rq_theta_hat(r: int, Q: int, lam: float, nu, literal_exponent: bool = False) -> np.ndarray:
    """Departure-epoch environment law of the (r, Q) model, aligned with ``build_rq`` states."""
    nu = _rates(nu, r + 1, "nu")
    env = build_rq(r, Q, lam, 1.0, nu)[0].env
    P = _growth(lam, nu, r, literal_exponent)
    values = {k: P[min(k, r)] for k in range(Q)}
    for k in range(Q, r + Q):
        values[k] = P[r] - P[k - Q]
    values[r + Q] = 0.0
    return _aligned(env, values)


# ---------------------------------------------------------------- M/G/1 environments

def zero_lead_time_env(r: int, S: int) -> EnvironmentSpec:
    """Instant replenishment: stock cycles ``S -> ... -> r+1 -> S`` with one step per departure."""
    states = list(range(r + 1, S + 1))
    R = {(k, k - 1): 1.0 for k in range(r + 2, S + 1)}
    R[(r + 1, S)] = 1.0
    return _env(states, set(), {}, R)


def zero_s_env(S: int, nu: float) -> EnvironmentSpec:
    """(0, S) policy: stock-out blocks until a replenishment at rate ``nu`` refills to ``S``."""
    states = list(range(S + 1))
    R = {(0, 0): 1.0, **{(k, k - 1): 1.0 for k in range(1, S + 1)}}
    return _env(states, {0}, {(0, S): nu}, R)


def vacation_env(rate_back: float) -> EnvironmentSpec:
    """After every departure the server leaves for an exponential break with rate ``rate_back``."""
    return _env(["up", "away"], {"away"}, {("away", "up"): rate_back}, {("up", "away"): 1.0, ("away", "away"): 1.0})


BUILDERS = {
    "rs": build_rs,
    "rq": build_rq,
    "tandem": build_tandem,
    "sensor": build_sensor_node,
}
