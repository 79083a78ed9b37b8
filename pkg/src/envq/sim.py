"""Event-driven simulation of a single server in a random environment.

Each service carries a work requirement that is processed at a
level-dependent speed.  Exponential service at rate ``mu(n)`` is Exp(1)
work at speed ``mu(n)``; general laws draw work from a ``ServiceLaw`` at
service start and process it at speed ``c(n)``.  While the environment
blocks, arrivals are lost and the remaining work is kept until the
environment returns to a non-blocking state.
"""

from __future__ import annotations

import os
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from envq.env_core import ModelSpec
from envq.mg1 import ServiceLaw

N_BATCHES = 20
WARMUP = 0.05
BLOCK = 1 << 16


def default_seed(seed: int | None = None) -> int:
    if seed is not None:
        return int(seed)
    return int(os.environ.get("ENVQ_SEED", "0"))


@dataclass(frozen=True)
class SimEstimate:
    """Time-average occupancy and departure-epoch frequencies with batch-means errors.

    Arrays are indexed ``[level, env]`` with environment order ``states``.
    """

    states: tuple
    occupancy: np.ndarray
    occupancy_se: np.ndarray
    departures: np.ndarray
    departures_se: np.ndarray
    departure_counts: np.ndarray
    batch_occupancy: np.ndarray = field(repr=False)
    batch_departures: np.ndarray = field(repr=False)
    events: int = 0
    seed: int = 0

    @property
    def n_departures(self) -> int:
        return int(self.departure_counts.sum())

    def _marg(self, batches: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
        per = batches.sum(axis=axis)
        return per.mean(axis=0), per.std(axis=0, ddof=1) / np.sqrt(per.shape[0])

    def env_marginal(self, embedded: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Environment law and its standard error (departure epochs if ``embedded``)."""
        est = self.departures if embedded else self.occupancy
        _, se = self._marg(self.batch_departures if embedded else self.batch_occupancy, 1)
        return est.sum(axis=0), se

    def level_marginal(self, embedded: bool = False) -> tuple[np.ndarray, np.ndarray]:
        est = self.departures if embedded else self.occupancy
        _, se = self._marg(self.batch_departures if embedded else self.batch_occupancy, 2)
        return est.sum(axis=1), se


class _Stream:
    """Buffered draws from one generator so the event loop avoids per-call overhead."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self._u = rng.random(BLOCK).tolist()
        self._e = rng.standard_exponential(BLOCK).tolist()
        self._iu = 0
        self._ie = 0

    def uniform(self) -> float:
        if self._iu == BLOCK:
            self._u = self.rng.random(BLOCK).tolist()
            self._iu = 0
        x = self._u[self._iu]
        self._iu += 1
        return x

    def exponential(self) -> float:
        if self._ie == BLOCK:
            self._e = self.rng.standard_exponential(BLOCK).tolist()
            self._ie = 0
        x = self._e[self._ie]
        self._ie += 1
        return x


class _WorkSource:
    def __init__(self, law: ServiceLaw, rng: np.random.Generator):
        self.law, self.rng = law, rng
        self._buf: list[float] = []
        self._i = 0

    def draw(self) -> float:
        if self._i == len(self._buf):
            self._buf = self.law.sample(self.rng, 4096).tolist()
            self._i = 0
        x = self._buf[self._i]
        self._i += 1
        return x


def _cumulative_rows(P: np.ndarray) -> list[list[float]]:
    rows = []
    for row in P:
        c = np.cumsum(row)
        c[-1] = max(c[-1], 1.0)
        rows.append(c.tolist())
    return rows


def simulate(
    model: ModelSpec,
    horizon_events: int,
    seed: int | None = None,
    service: ServiceLaw | Sequence[ServiceLaw] | None = None,
    speeds: Sequence[float] | None = None,
    initial: tuple[int, int] = (0, 0),
) -> SimEstimate:
    """Run ``horizon_events`` events and collect occupancy and departure statistics.

    ``service`` may be one law or one law per level ``1..len``, the last
    reused above; ``speeds[n-1]`` is the processing speed at level ``n``
    (default 1).  Without ``service`` the model's exponential rates are used.
    """
    if horizon_events < 10_000:
        raise ValueError("horizon must be at least 10^4 events")
    seed = default_seed(seed)
    rng = np.random.Generator(np.random.Philox(seed))
    draws = _Stream(rng)
    env, q = model.env, model.queue
    K = env.size
    w_mask = env.w_mask.tolist()
    top = q.top_level
    V = env.V
    out_rate = (-np.diag(V)).tolist()
    jump = V.copy()
    np.fill_diagonal(jump, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        jump = np.where(np.array(out_rate)[:, None] > 0, jump / np.array(out_rate)[:, None], 0.0)
    v_cum = _cumulative_rows(jump)
    r_cum = _cumulative_rows(env.R)

    n_tail = q.n_tail
    lam_tab = [q.lam_at(n) for n in range(n_tail + 1)]
    if service is None:
        speed_tab = [0.0] + [q.mu_at(n) for n in range(1, n_tail + 1)]
        sources = None
    else:
        laws = [service] if isinstance(service, ServiceLaw) else list(service)
        sources = [_WorkSource(law, rng) for law in laws]
        sp = list(speeds) if speeds is not None else [1.0]
        speed_tab = [0.0] + sp
        n_tail = max(n_tail, len(sp), len(laws))
    sp_last = len(speed_tab) - 1

    def new_work(level: int) -> float:
        if sources is None:
            return draws.exponential()
        return sources[min(level, len(sources)) - 1].draw()

    warm = int(horizon_events * WARMUP)
    per_batch = (horizon_events - warm) // N_BATCHES
    if per_batch <= 0:
        raise ValueError("horizon too short for batch means")

    n, k = initial
    work = new_work(n) if n > 0 else 0.0
    occ: list[list[float]] = []
    dep: list[list[int]] = []
    batch_occ = []
    batch_dep = []
    cur_occ: list[float] = [0.0] * (K * 64)
    cur_dep: list[int] = [0] * (K * 64)
    events = 0
    batch_end = warm
    collecting = False
    total = warm + per_batch * N_BATCHES
    lam_last = len(lam_tab) - 1

    while events < total:
        if events == batch_end:
            if collecting:
                occ.append(cur_occ)
                dep.append(cur_dep)
            size = max(len(cur_occ), K * 64)
            cur_occ = [0.0] * size
            cur_dep = [0] * size
            collecting = True
            batch_end += per_batch
        active = w_mask[k]
        a = lam_tab[n if n < lam_last else lam_last] if active and (top is None or n < top) else 0.0
        rate = a + out_rate[k]
        t_other = draws.exponential() / rate if rate > 0 else float("inf")
        if active and n > 0:
            speed = speed_tab[n if n < sp_last else sp_last]
            t_dep = work / speed
        else:
            speed = 0.0
            t_dep = float("inf")
        dt = t_dep if t_dep < t_other else t_other
        if dt == float("inf"):
            raise RuntimeError(f"no event possible in state (n={n}, k={env.states[k]!r})")
        idx = n * K + k
        if idx >= len(cur_occ):
            grow = idx + 1 - len(cur_occ) + K * 64
            cur_occ.extend([0.0] * grow)
            cur_dep.extend([0] * grow)
        cur_occ[idx] += dt
        if t_dep < t_other:
            n -= 1
            k = bisect_right(r_cum[k], draws.uniform())
            cur_dep[n * K + k] += 1
            work = new_work(n) if n > 0 else 0.0
        else:
            work -= dt * speed
            if draws.uniform() * rate < a:
                n += 1
                if n == 1:
                    work = new_work(1)
            else:
                k = bisect_right(v_cum[k], draws.uniform())
        events += 1
    occ.append(cur_occ)
    dep.append(cur_dep)

    width = max(len(b) for b in occ)
    levels = -(-width // K)
    B_occ = np.zeros((N_BATCHES, levels, K))
    B_dep = np.zeros((N_BATCHES, levels, K))
    for i, (o, d) in enumerate(zip(occ, dep)):
        B_occ[i].flat[:len(o)] = o
        B_dep[i].flat[:len(d)] = d
    used = np.flatnonzero((B_occ.sum(axis=(0, 2)) + B_dep.sum(axis=(0, 2))) > 0)
    levels = int(used.max()) + 1 if used.size else 1
    B_occ, B_dep = B_occ[:, :levels], B_dep[:, :levels]
    counts = B_dep.sum(axis=0)
    occupancy = B_occ.sum(axis=0) / B_occ.sum()
    departures = counts / max(counts.sum(), 1.0)
    P_occ = B_occ / B_occ.sum(axis=(1, 2), keepdims=True)
    d_tot = B_dep.sum(axis=(1, 2), keepdims=True)
    P_dep = np.divide(B_dep, d_tot, out=np.zeros_like(B_dep), where=d_tot > 0)
    return SimEstimate(
        states=env.states,
        occupancy=occupancy,
        occupancy_se=P_occ.std(axis=0, ddof=1) / np.sqrt(N_BATCHES),
        departures=departures,
        departures_se=P_dep.std(axis=0, ddof=1) / np.sqrt(N_BATCHES),
        departure_counts=counts,
        batch_occupancy=P_occ,
        batch_departures=P_dep,
        events=events,
        seed=seed,
    )


def simulate_embedded_marginal(model: ModelSpec, horizon: int, seed: int | None = None,
                               **kwargs) -> tuple[np.ndarray, np.ndarray]:
    """Environment frequencies just after departures, with batch-means standard errors."""
    return simulate(model, horizon, seed, **kwargs).env_marginal(embedded=True)


def within_standard_errors(estimate: np.ndarray, se: np.ndarray, exact: np.ndarray,
                           k: float = 3.0, floor: float = 1e-3) -> np.ndarray:
    """Mask of cells with ``exact > floor`` that fall outside ``k`` standard errors."""
    L = min(estimate.shape[0], exact.shape[0])
    est = np.zeros_like(exact)
    err = np.zeros_like(exact)
    est[:L], err[:L] = estimate[:L], se[:L]
    return (exact > floor) & (np.abs(est - exact) > k * err)


def independence_test(counts: np.ndarray) -> tuple[float, float, int]:
    """Chi-square statistic for independence of level and environment, its 99% threshold, and dof."""
    table = counts[counts.sum(axis=1) > 0][:, counts.sum(axis=0) > 0]
    stat, _, dof, _ = stats.chi2_contingency(table, correction=False)
    return float(stat), float(stats.chi2.ppf(0.99, dof)), int(dof)
