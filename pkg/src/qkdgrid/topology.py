"""Communication graphs for the secondary-control layer.

Indexing convention used everywhere in the package: ``entries[x, y] == 1``
means DG ``x`` consumes measurements that originate at DG ``y``. Information
therefore flows from column ``y`` to row ``x``. Node indices are 0-based
internally; configuration files and CSV output use 1-based DG ids.
"""

from __future__ import annotations

import itertools
from collections import deque
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import NoHealthyNode, SingularGain

EIG_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class AdjacencyMatrix:
    """Binary consumption matrix with a small integer label (S1, S2, ...)."""

    entries: np.ndarray
    id: int = 1

    def __post_init__(self):
        a = np.array(self.entries, dtype=np.int8, copy=True)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {a.shape}")
        if a.shape[0] < 2:
            raise ValueError("adjacency needs at least 2 nodes")
        if not np.isin(a, (0, 1)).all():
            raise ValueError("adjacency entries must be 0 or 1")
        if np.diagonal(a).any():
            raise ValueError("adjacency diagonal must be zero")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def complete(cls, n: int, id: int = 1) -> AdjacencyMatrix:
        return cls(np.ones((n, n), dtype=np.int8) - np.eye(n, dtype=np.int8), id=id)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]], id: int = 1) -> AdjacencyMatrix:
        return cls(np.asarray(rows), id=id)

    def sources(self, x: int) -> list[int]:
        """In-neighbors of ``x``: the DGs whose data ``x`` consumes."""
        return [int(y) for y in np.flatnonzero(self.entries[x])]

    def consumers(self, y: int) -> list[int]:
        return [int(x) for x in np.flatnonzero(self.entries[:, y])]

    def edges(self) -> list[tuple[int, int]]:
        """All (consumer, source) pairs."""
        return [(int(x), int(y)) for x, y in zip(*np.nonzero(self.entries))]

    def is_symmetric(self) -> bool:
        return bool((self.entries == self.entries.T).all())

    def same_edges(self, other: AdjacencyMatrix) -> bool:
        return self.n == other.n and bool((self.entries == other.entries).all())

    def with_id(self, id: int) -> AdjacencyMatrix:
        return AdjacencyMatrix(self.entries, id=id)

    def __repr__(self) -> str:
        rows = ",".join("".join(str(int(v)) for v in r) for r in self.entries)
        return f"AdjacencyMatrix(id={self.id}, rows={rows})"


@dataclass(frozen=True)
class PinningVector:
    """Non-negative pinning gains g_x; DGs with g_x > 0 see the set-point."""

    gains: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        g = np.array(self.gains, dtype=float, copy=True)
        if g.ndim != 1:
            raise ValueError("pinning gains must be a vector")
        if (g < 0).any() or not np.isfinite(g).all():
            raise ValueError("pinning gains must be finite and non-negative")
        g.setflags(write=False)
        object.__setattr__(self, "gains", g)

    @classmethod
    def leader(cls, n: int, index: int = 0, gain: float = 1.0) -> PinningVector:
        g = np.zeros(n)
        g[index] = gain
        return cls(g)

    @property
    def pinned(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.gains > 0)]


def laplacian(adj: AdjacencyMatrix) -> np.ndarray:
    """In-degree Laplacian: L = D_in - A, every row sums to zero."""
    a = adj.entries.astype(float)
    return np.diag(a.sum(axis=1)) - a


def lambda_min(adj: AdjacencyMatrix, pin: PinningVector) -> float:
    """Smallest eigenvalue (smallest real part for directed graphs) of L + G."""
    m = laplacian(adj) + np.diag(pin.gains)
    if adj.is_symmetric():
        return float(np.linalg.eigvalsh(m)[0])
    return float(np.min(np.linalg.eigvals(m).real))


def consensus_gain(adj: AdjacencyMatrix, pin: PinningVector) -> float:
    """Lower bound 1 / (2 lambda_min(L + G)) on the consensus gains K1 = K2."""
    if pin.gains.shape[0] != adj.n:
        raise ValueError("pinning vector length does not match the graph")
    lam = lambda_min(adj, pin)
    if lam <= EIG_TOL:
        raise SingularGain(f"lambda_min(L+G) = {lam:.3e}; graph is unpinned or disconnected")
    return 1.0 / (2.0 * lam)


def reachable_from(adj: AdjacencyMatrix, roots: Iterable[int]) -> set[int]:
    """Nodes that receive (possibly multi-hop) information originating at ``roots``."""
    seen = set(int(r) for r in roots)
    queue = deque(seen)
    while queue:
        y = queue.popleft()
        for x in adj.consumers(y):
            if x not in seen:
                seen.add(x)
                queue.append(x)
    return seen


def is_valid_topology(adj: AdjacencyMatrix, pin: PinningVector) -> bool:
    """True iff every node is reached by the reference of some pinned node."""
    roots = pin.pinned
    if not roots:
        return False
    return len(reachable_from(adj, roots)) == adj.n


def perturb_matrix(
    active: AdjacencyMatrix,
    flags: Sequence[bool],
    healthy: int | None = None,
    id: int | None = None,
) -> tuple[AdjacencyMatrix, AdjacencyMatrix]:
    """Isolate flagged DGs behind a healthy DG ``b``.

    Every flagged DG ``a`` loses all of its incoming and outgoing edges and
    is left consuming from ``b`` only. The returned error-propagation matrix
    marks every edge that carries data originating at a flagged DG, so the
    elementwise AND with the new matrix is zero. Any healthy DG (other than
    ``b``) whose data is no longer consumed by anyone gets consumed by ``b``.

    Returns ``(S_j, Xi_E)``.
    """
    flags = np.asarray(flags, dtype=bool)
    n = active.n
    if flags.shape != (n,):
        raise ValueError("flags length does not match the graph")
    if flags.all():
        raise NoHealthyNode("every DG is flagged; no healthy reference remains")
    if not flags.any():
        raise ValueError("perturb_matrix needs at least one flagged DG")
    if healthy is None:
        healthy = int(np.flatnonzero(~flags)[0])
    b = int(healthy)
    if flags[b]:
        raise ValueError(f"healthy DG index {b} is flagged")

    s = active.entries.astype(np.int8).copy()
    xi = np.zeros((n, n), dtype=np.int8)
    for a in np.flatnonzero(flags):
        s[a, :] = 0
        s[:, a] = 0
        s[a, b] = 1
        xi[:, a] = 1
    np.fill_diagonal(xi, 0)
    for c in range(n):
        if c != b and not flags[c] and not s[:, c].any():
            s[b, c] = 1
    assert not (s & xi).any()
    new_id = active.id if id is None else id
    return AdjacencyMatrix(s, id=new_id), AdjacencyMatrix(xi, id=0)


@dataclass
class CertificationReport:
    n: int
    max_flagged: int
    cases: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def certify_perturbation(n: int = 4, max_flagged: int | None = None) -> CertificationReport:
    """Exhaustively check perturb_matrix on the complete ``n``-node graph.

    For every non-empty flagged set of size <= ``max_flagged`` and every
    healthy choice outside it: AND(S_j, Xi_E) == 0 and every flagged DG is
    reached from the healthy DG.
    """
    if max_flagged is None:
        max_flagged = n - 1
    base = AdjacencyMatrix.complete(n)
    report = CertificationReport(n=n, max_flagged=max_flagged)
    for k in range(1, max_flagged + 1):
        for flagged in itertools.combinations(range(n), k):
            flags = np.zeros(n, dtype=bool)
            flags[list(flagged)] = True
            for b in range(n):
                if flags[b]:
                    continue
                report.cases += 1
                s_j, xi = perturb_matrix(base, flags, b)
                if (s_j.entries & xi.entries).any():
                    report.failures.append(f"F={flagged} b={b}: S_j AND Xi_E != 0")
                reach = reachable_from(s_j, [b])
                missing = [a for a in flagged if a not in reach]
                if missing:
                    report.failures.append(f"F={flagged} b={b}: unreachable {missing}")
    return report
