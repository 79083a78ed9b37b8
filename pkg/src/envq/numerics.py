"""Linear-algebra services for finite Markov chains.

Stationary vectors are computed with the Grassmann-Taksar-Heyman (GTH)
elimination, which never subtracts and therefore keeps full relative
accuracy on generators with widely spread rates.  Reducible inputs are
handled by restricting to the unique closed communicating class.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

EPS_RES = 1e-10
EPS_STOCH = 1e-9


class MultipleClosedClasses(ValueError):
    """The chain has more than one closed class, so the stationary law is not unique."""

    def __init__(self, classes: list[np.ndarray]):
        self.classes = classes
        super().__init__(f"{len(classes)} closed communicating classes: {[c.tolist() for c in classes]}")


class Singular(ValueError):
    """A linear system could not be solved to the required residual."""


@dataclass(frozen=True)
class FlowGraph:
    """Directed graph of nonzero off-diagonal entries of a square matrix."""

    n: int
    edges: frozenset

    @classmethod
    def of(cls, M: np.ndarray) -> "FlowGraph":
        M = np.asarray(M)
        nz = M != 0
        np.fill_diagonal(nz, False)
        rows, cols = np.nonzero(nz)
        return cls(M.shape[0], frozenset(zip(rows.tolist(), cols.tolist())))

    def successors(self, k: int) -> list[int]:
        return sorted(m for (a, m) in self.edges if a == k)


@dataclass(frozen=True)
class FlowVerdict:
    status: str  # "invertible_certified" | "flow_violated" | "hypotheses_unmet"
    witness: tuple = ()
    reason: str = ""

    @property
    def certified(self) -> bool:
        return self.status == "invertible_certified"


def _offdiag_positive(A: np.ndarray) -> np.ndarray:
    adj = np.asarray(A, dtype=float) > 0
    np.fill_diagonal(adj, False)
    return adj


def reachable_from(adj: np.ndarray, sources: Iterable[int]) -> np.ndarray:
    """Boolean mask of vertices reachable from ``sources`` (sources included)."""
    n = adj.shape[0]
    seen = np.zeros(n, dtype=bool)
    stack = list(sources)
    for s in stack:
        seen[s] = True
    while stack:
        k = stack.pop()
        for m in np.flatnonzero(adj[k] & ~seen):
            seen[m] = True
            stack.append(int(m))
    return seen


def can_reach(adj: np.ndarray, targets: Iterable[int]) -> np.ndarray:
    """Boolean mask of vertices with a directed path into ``targets``."""
    return reachable_from(adj.T, targets)


def closed_classes(A: np.ndarray) -> list[np.ndarray]:
    """Closed communicating classes of the positive off-diagonal graph of ``A``.

    Works for generators and stochastic matrices alike because only the
    off-diagonal support matters.
    """
    adj = _offdiag_positive(A)
    n = adj.shape[0]
    if n == 0:
        return []
    ncomp, labels = connected_components(csr_matrix(adj), directed=True, connection="strong")
    leaves = np.ones(ncomp, dtype=bool)
    src, dst = np.nonzero(adj)
    leaves[labels[src][labels[src] != labels[dst]]] = False
    return [np.flatnonzero(labels == c) for c in range(ncomp) if leaves[c]]


def gth(A: np.ndarray) -> np.ndarray:
    """Stationary vector of an irreducible chain given its off-diagonal rates.

    ``A`` may be a generator or a stochastic matrix; the diagonal is ignored.
    """
    A = np.array(A, dtype=float)
    n = A.shape[0]
    if n == 1:
        return np.ones(1)
    np.fill_diagonal(A, 0.0)
    scale = np.empty(n)
    for k in range(n - 1, 0, -1):
        s = A[k, :k].sum()
        if s <= 0.0:
            raise ValueError("chain is not irreducible on the given states")
        scale[k] = s
        A[:k, :k] += np.outer(A[:k, k], A[k, :k]) / s
    pi = np.zeros(n)
    pi[0] = 1.0
    for k in range(1, n):
        pi[k] = pi[:k] @ A[:k, k] / scale[k]
    return pi / pi.sum()


def _stationary(A: np.ndarray) -> np.ndarray:
    classes = closed_classes(A)
    if len(classes) != 1:
        raise MultipleClosedClasses(classes)
    cls = classes[0]
    pi = np.zeros(A.shape[0])
    pi[cls] = gth(A[np.ix_(cls, cls)])
    return pi / pi.sum()


def is_generator(G: np.ndarray, tol: float = EPS_STOCH) -> bool:
    G = np.asarray(G, dtype=float)
    off = G - np.diag(np.diag(G))
    scale = max(1.0, float(np.abs(G).max(initial=0.0)))
    return bool((off >= -tol * scale).all() and np.allclose(G.sum(axis=1), 0.0, atol=tol * scale))


def is_stochastic(P: np.ndarray, tol: float = EPS_STOCH) -> bool:
    P = np.asarray(P, dtype=float)
    return bool((P >= -tol).all() and (P <= 1 + tol).all() and np.allclose(P.sum(axis=1), 1.0, atol=tol))


def stationary_of_generator(G: np.ndarray) -> np.ndarray:
    """Probability vector ``theta`` with ``theta @ G = 0``.

    Supported on the single closed class of ``G``; raises
    :class:`MultipleClosedClasses` when that class is not unique.
    """
    G = np.asarray(G, dtype=float)
    if not is_generator(G):
        raise ValueError("matrix is not a generator")
    return _stationary(G)


def stationary_of_stochastic(P: np.ndarray) -> np.ndarray:
    """Probability vector ``theta`` with ``theta @ P = theta`` on the unique closed class."""
    P = np.asarray(P, dtype=float)
    if not is_stochastic(P):
        raise ValueError("matrix is not row-stochastic")
    return _stationary(P)


def period(P: np.ndarray, cls: Sequence[int]) -> int:
    """Period of a communicating class from BFS depths (gcd of cycle offsets)."""
    cls = list(cls)
    sub = np.asarray(P)[np.ix_(cls, cls)] > 0
    depth = {0: 0}
    order = [0]
    for u in order:
        for v in np.flatnonzero(sub[u]):
            v = int(v)
            if v not in depth:
                depth[v] = depth[u] + 1
                order.append(v)
    g = 0
    for u in range(len(cls)):
        for v in np.flatnonzero(sub[u]):
            g = np.gcd(g, depth[u] + 1 - depth[int(v)])
    return int(abs(g)) or 1


def check_flow_invertible(M: np.ndarray, w_idx: Iterable[int], tol: float = EPS_STOCH) -> FlowVerdict:
    """Certify invertibility of ``M`` via diagonal dominance plus the flow condition.

    Rows in ``w_idx`` must be strictly diagonally dominant, the remaining
    rows must have diagonal modulus equal to their off-diagonal absolute
    sum, and every remaining row must reach a ``w_idx`` row in the graph of
    nonzero off-diagonal entries.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    w = np.zeros(n, dtype=bool)
    w[list(w_idx)] = True
    if not w.any():
        return FlowVerdict("hypotheses_unmet", reason="index set K_W is empty")
    diag = np.abs(np.diag(M))
    off = np.abs(M).sum(axis=1) - diag
    scale = np.maximum(1.0, diag)
    weak = np.flatnonzero(w & (diag - off <= tol * scale))
    if weak.size:
        return FlowVerdict("hypotheses_unmet", witness=tuple(weak.tolist()),
                           reason="K_W rows not strictly diagonally dominant")
    unequal = np.flatnonzero(~w & (np.abs(diag - off) > tol * scale))
    if unequal.size:
        return FlowVerdict("hypotheses_unmet", witness=tuple(unequal.tolist()),
                           reason="K_B rows do not have |M_kk| equal to off-diagonal sum")
    adj = M != 0
    np.fill_diagonal(adj, False)
    stuck = np.flatnonzero(~can_reach(adj, np.flatnonzero(w)))
    if stuck.size:
        return FlowVerdict("flow_violated", witness=tuple(stuck.tolist()),
                           reason="states in K_B with no path to K_W")
    return FlowVerdict("invertible_certified")


def solve_linear(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` and check ``|A x - b|_inf <= EPS_RES (1 + |b|_inf)``.

    ``b`` may be a vector or a matrix of right-hand sides.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    try:
        x = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise Singular(str(exc)) from exc
    res = np.abs(A @ x - b).max(initial=0.0)
    if not np.isfinite(res) or res > EPS_RES * (1.0 + np.abs(b).max(initial=0.0)):
        raise Singular(f"residual {res:.3e} exceeds tolerance")
    return x


def inverse(A: np.ndarray) -> np.ndarray:
    return solve_linear(A, np.eye(np.asarray(A).shape[0]))


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
