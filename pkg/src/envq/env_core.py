"""Model data types: queue rates, environment, and their validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Hashable, Sequence

import numpy as np

from envq.numerics import EPS_STOCH, can_reach


def _frozen(a: Any) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EnvironmentSpec:
    """Finite environment ``K = K_W + K_B`` with generator ``V`` and jump matrix ``R``.

    States are stably reordered so that every non-blocking state precedes
    every blocking one.  ``permutation[i]`` is the position in the caller's
    original ``states`` sequence of internal state ``i``.
    """

    states: tuple
    blocking: frozenset
    V: np.ndarray
    R: np.ndarray
    permutation: tuple = field(default=(), compare=False)

    def __post_init__(self):
        states = tuple(self.states)
        blocking = frozenset(self.blocking)
        unknown = blocking - set(states)
        if unknown:
            raise ValueError(f"blocking states not in K: {sorted(map(str, unknown))}")
        if len(set(states)) != len(states):
            raise ValueError("duplicate environment labels")
        V = np.array(self.V, dtype=float)
        R = np.array(self.R, dtype=float)
        n = len(states)
        if n == 0:
            raise ValueError("environment needs at least one state")
        if V.shape != (n, n) or R.shape != (n, n):
            raise ValueError(f"V and R must be {n}x{n}, got {V.shape} and {R.shape}")
        perm = [i for i, s in enumerate(states) if s not in blocking]
        perm += [i for i, s in enumerate(states) if s in blocking]
        if self.permutation:
            # already ordered by a previous construction
            perm_out = tuple(self.permutation)
        else:
            perm_out = tuple(perm)
        object.__setattr__(self, "states", tuple(states[i] for i in perm))
        object.__setattr__(self, "blocking", blocking)
        object.__setattr__(self, "V", _frozen(V[np.ix_(perm, perm)]))
        object.__setattr__(self, "R", _frozen(R[np.ix_(perm, perm)]))
        object.__setattr__(self, "permutation", perm_out)

    @property
    def size(self) -> int:
        return len(self.states)

    @property
    def w_mask(self) -> np.ndarray:
        return np.array([s not in self.blocking for s in self.states])

    @property
    def w_idx(self) -> np.ndarray:
        return np.flatnonzero(self.w_mask)

    @property
    def b_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.w_mask)

    def index(self, label: Hashable) -> int:
        return self.states.index(label)

    def vector(self, values: dict) -> np.ndarray:
        """Dense vector in internal order from a ``{label: value}`` mapping."""
        return np.array([values.get(s, 0.0) for s in self.states], dtype=float)

    def as_dict(self, vec: Sequence[float]) -> dict:
        return {s: float(v) for s, v in zip(self.states, vec)}


@dataclass(frozen=True)
class QueueSpec:
    """Arrival rates ``lam[n]`` for ``n = 0..n_tail`` and service rates ``mu[n-1]`` for ``n = 1..n_tail``.

    Both sequences stay constant beyond ``n_tail``.  ``capacity`` is ``None``
    for an infinite waiting room, otherwise ``N`` with levels ``0..N+1``.
    """

    lam: tuple
    mu: tuple
    capacity: int | None = None

    def __post_init__(self):
        lam = tuple(float(x) for x in np.atleast_1d(self.lam))
        mu = tuple(float(x) for x in np.atleast_1d(self.mu))
        n_tail = max(len(lam) - 1, len(mu), 1)
        lam = lam + (lam[-1],) * (n_tail + 1 - len(lam))
        mu = mu + (mu[-1],) * (n_tail - len(mu))
        if min(lam) <= 0 or min(mu) <= 0:
            raise ValueError("arrival and service rates must be strictly positive")
        if self.capacity is not None and int(self.capacity) < 0:
            raise ValueError("capacity must be nonnegative")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "mu", mu)

    @classmethod
    def constant(cls, lam: float, mu: float, capacity: int | None = None) -> "QueueSpec":
        return cls((lam,), (mu,), capacity)

    @property
    def n_tail(self) -> int:
        return len(self.mu)

    def lam_at(self, n: int) -> float:
        return self.lam[min(n, self.n_tail)]

    def mu_at(self, n: int) -> float:
        if n < 1:
            raise ValueError("service rate defined for n >= 1")
        return self.mu[min(n, self.n_tail) - 1]

    @property
    def rho_tail(self) -> float:
        return self.lam[-1] / self.mu[-1]

    @property
    def constant_lambda(self) -> bool:
        return len(set(self.lam)) == 1

    @property
    def top_level(self) -> int | None:
        return None if self.capacity is None else self.capacity + 1


@dataclass(frozen=True)
class ModelSpec:
    queue: QueueSpec
    env: EnvironmentSpec
    name: str = "model"

    def with_queue(self, **changes) -> "ModelSpec":
        q = self.queue
        fields = {"lam": q.lam, "mu": q.mu, "capacity": q.capacity}
        fields.update(changes)
        return ModelSpec(QueueSpec(**fields), self.env, self.name)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        return "accepted" if self.ok else "rejected:\n" + "\n".join(f"  - {v}" for v in self.violations)


def i_w(env: EnvironmentSpec) -> np.ndarray:
    """Diagonal projector onto the non-blocking states."""
    return np.diag(env.w_mask.astype(float))


def validate(model: ModelSpec | EnvironmentSpec, tol: float = EPS_STOCH) -> ValidationReport:
    """Collect structural violations; an empty list means the model is accepted."""
    env = model.env if isinstance(model, ModelSpec) else model
    report = ValidationReport()
    V, R = env.V, env.R
    if ((R < -tol) | (R > 1 + tol)).any() or not np.allclose(R.sum(axis=1), 1.0, atol=tol):
        bad = np.flatnonzero(np.abs(R.sum(axis=1) - 1.0) > tol).tolist()
        report.violations.append(f"R not stochastic (rows {[env.states[i] for i in bad]})")
    off = V - np.diag(np.diag(V))
    if (off < -tol).any():
        report.violations.append("V not a generator: negative off-diagonal rate")
    rows = np.flatnonzero(np.abs(V.sum(axis=1)) > tol)
    if rows.size:
        report.violations.append(f"V not a generator: rows {[env.states[i] for i in rows]} do not sum to 0")
    if not env.w_mask.any():
        report.violations.append("K_W is empty")
    else:
        stuck = np.flatnonzero(~can_reach(off > tol, env.w_idx))
        if stuck.size:
            report.violations.append(
                f"flow condition: blocking states {[env.states[i] for i in stuck]} have no V-path to K_W")
    return report


def _labels(states: Sequence) -> list:
    return [tuple(s) if isinstance(s, list) else s for s in states]


def _matrix(spec: Any, states: list, complete_diagonal: bool) -> np.ndarray:
    """Dense ``n x n`` list, ``{"triples": [...]}``, or a bare triple list whose shape is not ``n x n``."""
    n = len(states)
    if isinstance(spec, dict):
        triples = spec["triples"]
    elif np.shape(spec) == (n, n) and not (n == 3 and _has_labels(spec, states)):
        return np.array(spec, dtype=float)
    else:
        triples = spec
    M = np.zeros((n, n))
    pos = {s: i for i, s in enumerate(states)}
    for a, b, value in triples:
        a = tuple(a) if isinstance(a, list) else a
        b = tuple(b) if isinstance(b, list) else b
        M[pos[a], pos[b]] += float(value)
    if complete_diagonal:
        np.fill_diagonal(M, 0.0)
        np.fill_diagonal(M, -M.sum(axis=1))
    return M


def _has_labels(rows: Any, states: list) -> bool:
    return any(isinstance(x, str) for row in rows for x in row[:2])


def model_from_dict(doc: dict) -> ModelSpec:
    """Build a model from the JSON document layout.

    ``V`` and ``R`` are row-major matrices or ``{"triples": [[from, to, value], ...]}``.
    For ``V`` given as triples the diagonal is completed to zero row sums.
    """
    states = _labels(doc["states"])
    blocking = frozenset(_labels(doc.get("blocking", [])))
    V = _matrix(doc["V"], states, complete_diagonal=True)
    R = _matrix(doc["R"], states, complete_diagonal=False)
    env = EnvironmentSpec(tuple(states), blocking, V, R)
    cap = doc.get("capacity")
    queue = QueueSpec(tuple(np.atleast_1d(doc["lambda"])), tuple(np.atleast_1d(doc["mu"])),
                      None if cap in (None, "inf", "infinite") else int(cap))
    return ModelSpec(queue, env, str(doc.get("name", "model")))


def model_to_dict(model: ModelSpec) -> dict:
    env, q = model.env, model.queue
    return {
        "name": model.name,
        "states": [list(s) if isinstance(s, tuple) else s for s in env.states],
        "blocking": [list(s) if isinstance(s, tuple) else s for s in env.states if s in env.blocking],
        "V": env.V.tolist(),
        "R": env.R.tolist(),
        "lambda": list(q.lam),
        "mu": list(q.mu),
        "capacity": q.capacity,
    }


def load_model(path: str | Path) -> ModelSpec:
    return model_from_dict(json.loads(Path(path).read_text()))
