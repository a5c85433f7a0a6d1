"""Event-triggered error detection and adjacency-matrix mitigation.

Each consumer DG ``x`` evaluates, per incoming source ``y``, the residuals

    r1 = (omega_y - omega_x) + (m_Py P_y - m_Px P_x)
    r2 = n_Qy Q_y - n_Qx Q_x

and the aggregate metrics

    DM1 = |g_x (omega_n - omega_x) + sum_y r1|
    DM2 = |sum_y r2|

For truthful data r1 reduces to the difference of the secondary frequency
corrections, so it is small whenever the consensus layer is healthy.
Garbage from a mismatched key or an injected bias shows up immediately.
"""

from __future__ import annotations

import math
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import NoHealthyNode
from .secondary import NeighborView, source_terms
from .topology import AdjacencyMatrix, PinningVector, perturb_matrix, reachable_from

Edge = tuple[int, int]  # (consumer, source)


@dataclass(frozen=True)
class GuardConfig:
    upsilon1: float
    upsilon2: float
    debounce: int = 5
    recovery_hold: int = 200
    arm_time: float = 0.5

    def __post_init__(self):
        if not (self.upsilon1 > 0 and self.upsilon2 > 0):
            raise ValueError("detection thresholds must be positive")
        if self.debounce < 1 or self.recovery_hold < 1:
            raise ValueError("debounce and recovery_hold must be at least 1")


@dataclass(frozen=True)
class DetectionReport:
    dg: int
    dm1: float
    dm2: float
    triggered: bool
    flagged_sources: frozenset[int]
    t: float


def _finite_abs(v: float) -> float:
    return abs(v) if math.isfinite(v) else math.inf


def edge_residuals(
    x: int, view: NeighborView, local: tuple[float, float, float], droops: tuple[np.ndarray, np.ndarray]
) -> dict[int, tuple[float, float]]:
    """Per-source (r1, r2); non-finite garbage is mapped to +inf."""
    out = {}
    with np.errstate(all="ignore"):
        for y, rec in view.items():
            r1, r2 = source_terms(x, y, rec, local, *droops)
            out[y] = (r1 if math.isfinite(r1) else math.inf, r2 if math.isfinite(r2) else math.inf)
    return out


def detection_metrics(
    x: int,
    view: NeighborView,
    local: tuple[float, float, float],
    pin_gain: float,
    droops: tuple[np.ndarray, np.ndarray],
    omega_n: float,
) -> tuple[float, float]:
    res = edge_residuals(x, view, local, droops)
    with np.errstate(all="ignore"):
        s1 = pin_gain * (omega_n - local[0]) + sum(r[0] for r in res.values())
        s2 = sum(r[1] for r in res.values())
    return _finite_abs(s1), _finite_abs(s2)


def exceeds(r1: float, r2: float, cfg: GuardConfig) -> bool:
    return _finite_abs(r1) > cfg.upsilon1 or _finite_abs(r2) > cfg.upsilon2


class DgTrigger:
    """Debounced exceedance tracking for one consumer DG."""

    def __init__(self, cfg: GuardConfig):
        self.cfg = cfg
        self.counts: dict[int, int] = defaultdict(int)
        self.aggregate_count = 0

    def update(self, dm1: float, dm2: float, partials: Mapping[int, tuple[float, float]]) -> set[int]:
        """Feed one step; return the sources currently considered suspect."""
        cfg = self.cfg
        aggregate = dm1 > cfg.upsilon1 or dm2 > cfg.upsilon2
        suspects = {y for y, (r1, r2) in partials.items() if exceeds(r1, r2, cfg)}
        if aggregate and not suspects and partials:
            # attribute to the largest normalized contributor
            score = {
                y: _finite_abs(r1) / cfg.upsilon1 + _finite_abs(r2) / cfg.upsilon2
                for y, (r1, r2) in partials.items()
            }
            suspects = {max(sorted(score), key=score.__getitem__)}
        self.aggregate_count = self.aggregate_count + 1 if aggregate else 0
        for y in list(self.counts):
            if y not in suspects:
                self.counts[y] = 0
        for y in suspects:
            self.counts[y] += 1
        return suspects

    @property
    def flagged(self) -> set[int]:
        return {y for y, c in self.counts.items() if c >= self.cfg.debounce}

    @property
    def triggered(self) -> bool:
        return self.aggregate_count >= self.cfg.debounce or bool(self.flagged)

    def reset(self) -> None:
        self.counts.clear()
        self.aggregate_count = 0


def evaluate_trigger(
    history: Sequence[tuple[float, float] | tuple[float, float, Mapping[int, tuple[float, float]]]],
    cfg: GuardConfig,
) -> set[int]:
    """Replay a metric history for one DG and return the flagged sources.

    Each entry is ``(dm1, dm2)`` or ``(dm1, dm2, {source: (r1, r2)})``.
    Without per-source residuals the aggregate alone cannot be attributed,
    and a debounced aggregate exceedance is reported as source ``-1``.
    """
    trig = DgTrigger(cfg)
    for entry in history:
        partials = entry[2] if len(entry) > 2 else {}
        trig.update(entry[0], entry[1], partials)
    flagged = trig.flagged
    if not flagged and trig.aggregate_count >= cfg.debounce:
        flagged = {-1}
    return flagged


@dataclass(frozen=True)
class Flags:
    nodes: frozenset[int] = frozenset()
    links: frozenset[Edge] = frozenset()

    def __bool__(self) -> bool:
        return bool(self.nodes or self.links)


def classify_flags(edge_flags: Iterable[Edge], default: AdjacencyMatrix) -> Flags:
    """Split flagged (consumer, source) edges into node and link faults.

    A source is treated as a compromised node only when every consumer of it
    in the default matrix flags it. If some consumer still sees clean data
    from the same source, the fault is on the individual links.
    """
    edge_flags = set(edge_flags)
    by_source: dict[int, set[int]] = defaultdict(set)
    for x, y in edge_flags:
        by_source[y].add(x)
    nodes = {y for y, xs in by_source.items() if set(default.consumers(y)) <= xs}
    links = {(x, y) for x, y in edge_flags if y not in nodes}
    return Flags(frozenset(nodes), frozenset(links))


@dataclass
class Mitigation:
    matrix: AdjacencyMatrix
    xi: AdjacencyMatrix
    pinning: PinningVector
    healthy: int | None = None
    # consumer -> {lost flagged source: proxy DG whose values replace it}
    plan: dict[int, dict[int, int]] = field(default_factory=dict)

    def weights(self) -> dict[int, dict[int, float]]:
        """Per-consumer source weights that fold proxied terms onto the proxy."""
        out: dict[int, dict[int, float]] = {}
        for x, lost in self.plan.items():
            w: dict[int, float] = {}
            for proxy in lost.values():
                w[proxy] = w.get(proxy, 1.0) + 1.0
            out[x] = w
        return out


def mitigate(flags: Flags, base: AdjacencyMatrix, pin: PinningVector) -> Mitigation:
    """Build a matrix that carries no tainted edge, starting from ``base``."""
    n = base.n
    if not flags:
        return Mitigation(base, AdjacencyMatrix(np.zeros((n, n), dtype=np.int8), id=0), pin)
    node_flags = np.zeros(n, dtype=bool)
    for a in flags.nodes:
        node_flags[a] = True
    healthy = int(np.flatnonzero(~node_flags)[0]) if not node_flags.all() else None
    if healthy is None:
        raise NoHealthyNode("every DG is flagged; keeping the last valid matrix")

    if node_flags.any():
        s_j, xi = perturb_matrix(base, node_flags, healthy)
        s, x_e = s_j.entries.copy(), xi.entries.copy()
    else:
        s, x_e = base.entries.copy(), np.zeros((n, n), dtype=np.int8)
    for x, y in flags.links:
        s[x, y] = 0
        x_e[x, y] = 1

    gains = pin.gains.copy()
    if not any(gains[i] > 0 and not node_flags[i] for i in range(n)):
        gains[healthy] = max(pin.gains.max(), 1.0)
    new_pin = PinningVector(gains)

    # every DG, flagged ones included, must be reached from a healthy pinned DG
    roots = [r for r in new_pin.pinned if not node_flags[r]]
    for _ in range(n):
        reach = reachable_from(AdjacencyMatrix(s), roots)
        stranded = [c for c in range(n) if c not in reach]
        if not stranded:
            break
        for c in stranded:
            for src in sorted(reach, key=lambda r: (r != healthy, r)):
                if not x_e[c, src] and c != src:
                    s[c, src] = 1
                    break
    matrix = AdjacencyMatrix(s, id=base.id)
    if len(reachable_from(matrix, roots)) < n:
        raise NoHealthyNode("no untainted spanning configuration exists")
    assert not (s & x_e).any()

    plan: dict[int, dict[int, int]] = {}
    for x in range(n):
        lost = [y for y in base.sources(x) if node_flags[y] and not s[x, y]]
        if not lost:
            continue
        if x == healthy:
            plan[x] = {y: x for y in lost}
        elif s[x, healthy]:
            plan[x] = {y: healthy for y in lost}
    # self-proxies contribute nothing; keep them in the plan for reporting only
    return Mitigation(matrix, AdjacencyMatrix(x_e, id=0), new_pin, healthy, plan)


@dataclass
class GuardStep:
    accepted: dict[Edge, bool]
    reports: list[DetectionReport]
    mitigation: Mitigation | None = None
    restored: bool = False
    new_edge_flags: list[Edge] = field(default_factory=list)


class Guard:
    """Per-run detection and mitigation state for all DGs.

    Every step the caller passes, for each monitored edge, the values just
    decrypted by the consumer (``None`` when nothing arrived). Edges whose
    residuals exceed a threshold are quarantined immediately; an edge that
    stays suspect for ``debounce`` steps is flagged and the active matrix is
    rebuilt from the default one. Monitoring continues on quarantined edges,
    and the default matrix is reinstated after ``recovery_hold`` quiet steps.
    """

    def __init__(self, cfg: GuardConfig, default: AdjacencyMatrix, pin: PinningVector):
        self.cfg = cfg
        self.default = default
        self.default_pin = pin
        self.triggers = [DgTrigger(cfg) for _ in range(default.n)]
        self.edge_flags: set[Edge] = set()
        self.flags = Flags()
        self.quiet = 0

    @property
    def incident(self) -> bool:
        return bool(self.edge_flags)

    def step(
        self,
        t: float,
        views: Sequence[NeighborView],
        locals_: Sequence[tuple[float, float, float]],
        active: AdjacencyMatrix,
        pin: PinningVector,
        droops: tuple[np.ndarray, np.ndarray],
        omega_n: float,
    ) -> GuardStep:
        """``views[x]`` holds the raw records for every monitored source of ``x``."""
        cfg = self.cfg
        armed = t >= cfg.arm_time
        accepted: dict[Edge, bool] = {}
        reports = []
        any_suspect_flagged = False
        any_aggregate = False
        new_edges: list[Edge] = []
        for x, view in enumerate(views):
            partials = edge_residuals(x, view, locals_[x], droops)
            active_view = {y: view[y] for y in active.sources(x) if y in view}
            dm1, dm2 = detection_metrics(x, active_view, locals_[x], pin.gains[x], droops, omega_n)
            for y, (r1, r2) in partials.items():
                accepted[(x, y)] = not (armed and exceeds(r1, r2, cfg))
            if armed:
                suspects = self.triggers[x].update(dm1, dm2, partials)
                any_aggregate |= dm1 > cfg.upsilon1 or dm2 > cfg.upsilon2
                for y in self.triggers[x].flagged:
                    if (x, y) not in self.edge_flags:
                        self.edge_flags.add((x, y))
                        new_edges.append((x, y))
                any_suspect_flagged |= any((x, y) in self.edge_flags for y in suspects)
            trig = self.triggers[x]
            mine = frozenset(y for (c, y) in self.edge_flags if c == x)
            reports.append(DetectionReport(x, dm1, dm2, armed and (trig.triggered or bool(mine)), mine, t))

        result = GuardStep(accepted, reports, new_edge_flags=new_edges)
        if new_edges:
            flags = classify_flags(self.edge_flags, self.default)
            if flags != self.flags:
                self.flags = flags
                try:
                    result.mitigation = mitigate(flags, self.default, self.default_pin)
                except NoHealthyNode:
                    result.mitigation = None
            self.quiet = 0
        elif self.incident:
            if any_suspect_flagged or any_aggregate:
                self.quiet = 0
            else:
                self.quiet += 1
                if self.quiet >= cfg.recovery_hold:
                    self.edge_flags.clear()
                    self.flags = Flags()
                    self.quiet = 0
                    for trig in self.triggers:
                        trig.reset()
                    result.restored = True
        return result
