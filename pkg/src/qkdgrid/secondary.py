"""Leader-follower consensus layer producing the d_omega / d_v corrections."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, replace

import numpy as np

from .errors import Diverged
from .plant import DgState


@dataclass(frozen=True)
class NeighborRecord:
    """Last known (omega, P, Q) of one source DG as seen by a consumer."""

    omega: float
    p: float
    q: float
    fresh: bool = True
    age: int = 0

    def __post_init__(self):
        if self.fresh != (self.age == 0):
            raise ValueError("age must be 0 exactly when the record is fresh")

    def held(self) -> NeighborRecord:
        """Same values, one more step without a successful decrypt."""
        return replace(self, fresh=False, age=self.age + 1)


# source DG index -> record
NeighborView = Mapping[int, NeighborRecord]


@dataclass(frozen=True)
class ControlGains:
    k1: float
    k2: float

    def __post_init__(self):
        if not (self.k1 > 0 and self.k2 > 0):
            raise ValueError("consensus gains must be positive")

    @classmethod
    def equal(cls, k: float) -> ControlGains:
        return cls(k, k)


def source_terms(
    x: int,
    y: int,
    record: NeighborRecord,
    local: tuple[float, float, float],
    m_p: np.ndarray,
    n_q: np.ndarray,
) -> tuple[float, float]:
    """Disagreement contributed by source ``y`` to consumer ``x``.

    Returns ``((omega_y - omega_x) + (m_Py P_y - m_Px P_x), n_Qy Q_y - n_Qx Q_x)``.
    """
    omega_x, p_x, q_x = local
    r1 = (record.omega - omega_x) + (m_p[y] * record.p - m_p[x] * p_x)
    r2 = n_q[y] * record.q - n_q[x] * q_x
    return r1, r2


def secondary_rates(
    x: int,
    view: NeighborView,
    local: tuple[float, float, float],
    pin_gain: float,
    gains: ControlGains,
    droops: tuple[np.ndarray, np.ndarray],
    omega_n: float,
    weights: Mapping[int, float] | None = None,
) -> tuple[float, float]:
    """Right-hand sides of the d_omega and d_v single integrators for DG ``x``.

    Held (stale) records contribute their last values like fresh ones.
    ``weights`` scales individual sources; it is how reconstructed terms of
    lost sources are folded onto the healthy proxy.
    """
    m_p, n_q = droops
    s1 = pin_gain * (omega_n - local[0])
    s2 = 0.0
    for y, rec in view.items():
        w = 1.0 if weights is None else weights.get(y, 1.0)
        r1, r2 = source_terms(x, y, rec, local, m_p, n_q)
        s1 += w * r1
        s2 += w * r2
    return gains.k1 * s1, gains.k2 * s2


def integrate_secondary(
    state: DgState, rates: tuple[np.ndarray, np.ndarray], dt: float, t: float | None = None
) -> DgState:
    """Forward-Euler update of the secondary integrators over one cyber step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    d_omega = state.d_omega + np.asarray(rates[0]) * dt
    d_v = state.d_v + np.asarray(rates[1]) * dt
    if not (np.isfinite(d_omega).all() and np.isfinite(d_v).all()):
        raise Diverged("secondary integrator produced a non-finite value", t=t)
    return replace(state, d_omega=d_omega, d_v=d_v)
