"""Reduced-order droop plant: N inverter DGs on a phasor impedance network.

Each DG is a controlled voltage source ``E_x = v_x * exp(j delta_x)`` behind a
coupling resistance. Angles are measured in the frame rotating at the
nominal frequency, so ``d(delta)/dt = omega - omega_n``. Measured powers pass
through a first-order low-pass filter. Inner voltage/current loops and the
switching stage are not modelled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import Diverged, SingularNetwork

DIVERGENCE_BOUND = 1e9
OMEGA_NOMINAL = 2 * math.pi * 50


@dataclass(frozen=True)
class DgParams:
    """Droop parameters. ``m_p`` and ``n_q`` hold one value per DG."""

    m_p: np.ndarray
    n_q: np.ndarray
    omega_n: float = OMEGA_NOMINAL
    v_odn: float = 311.0
    omega_c: float = 31.4

    def __post_init__(self):
        m_p = np.atleast_1d(np.asarray(self.m_p, dtype=float)).copy()
        n_q = np.atleast_1d(np.asarray(self.n_q, dtype=float)).copy()
        if m_p.shape != n_q.shape:
            raise ValueError("m_p and n_q must have one entry per DG")
        if (m_p <= 0).any() or (n_q <= 0).any():
            raise ValueError("droop coefficients must be positive")
        for name in ("omega_n", "v_odn", "omega_c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        m_p.setflags(write=False)
        n_q.setflags(write=False)
        object.__setattr__(self, "m_p", m_p)
        object.__setattr__(self, "n_q", n_q)

    @classmethod
    def uniform(cls, n: int, m_p: float = 1e-4, n_q: float = 1e-4, **kw) -> DgParams:
        return cls(np.full(n, m_p), np.full(n, n_q), **kw)

    @property
    def n(self) -> int:
        return self.m_p.shape[0]


@dataclass(frozen=True)
class DgState:
    """Physical and secondary-control state, one array entry per DG."""

    delta: np.ndarray
    p_filt: np.ndarray
    q_filt: np.ndarray
    d_omega: np.ndarray
    d_v: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> DgState:
        z = np.zeros(n)
        return cls(z, z.copy(), z.copy(), z.copy(), z.copy())

    @property
    def n(self) -> int:
        return self.delta.shape[0]

    def check(self, t: float | None = None) -> None:
        for name in ("delta", "p_filt", "q_filt", "d_omega", "d_v"):
            a = getattr(self, name)
            if not np.isfinite(a).all() or (np.abs(a) > DIVERGENCE_BOUND).any():
                where = "" if t is None else f" at t={t:.6f}s"
                raise Diverged(f"{name} left the finite range{where}: {a}", t=t)


@dataclass(frozen=True)
class Line:
    frm: int
    to: int
    r: float
    x: float


@dataclass(frozen=True)
class NetworkModel:
    """Buses 0..n-1, DG ``x`` attached to bus ``x`` through ``r_c[x]``.

    ``loads`` maps a bus index to a constant (R, X) impedance in ohms.
    """

    n: int
    lines: tuple[Line, ...]
    loads: dict[int, tuple[float, float]] = field(default_factory=dict)
    r_c: np.ndarray | float = 0.1

    def __post_init__(self):
        r_c = np.broadcast_to(np.asarray(self.r_c, dtype=float), (self.n,)).copy()
        if (r_c < 0).any():
            raise ValueError("coupling resistance must be non-negative")
        object.__setattr__(self, "r_c", r_c)
        object.__setattr__(self, "lines", tuple(self.lines))
        for ln in self.lines:
            if ln.r < 0 or math.hypot(ln.r, ln.x) <= 0:
                raise ValueError(f"invalid line impedance {ln}")
            if not (0 <= ln.frm < self.n and 0 <= ln.to < self.n) or ln.frm == ln.to:
                raise ValueError(f"invalid line endpoints {ln}")
        for bus, (r, x) in self.loads.items():
            if not 0 <= bus < self.n or r < 0 or math.hypot(r, x) <= 0:
                raise ValueError(f"invalid load at bus {bus}: {(r, x)}")
        if not self._connected():
            raise ValueError("line graph does not connect all buses")

    def _connected(self) -> bool:
        seen, stack = {0}, [0]
        nbrs: dict[int, set[int]] = {i: set() for i in range(self.n)}
        for ln in self.lines:
            nbrs[ln.frm].add(ln.to)
            nbrs[ln.to].add(ln.frm)
        while stack:
            for j in nbrs[stack.pop()]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == self.n

    @cached_property
    def _bus_admittance(self) -> np.ndarray:
        ybb = np.zeros((self.n, self.n), dtype=complex)
        for ln in self.lines:
            y = 1.0 / complex(ln.r, ln.x)
            ybb[ln.frm, ln.frm] += y
            ybb[ln.to, ln.to] += y
            ybb[ln.frm, ln.to] -= y
            ybb[ln.to, ln.frm] -= y
        for bus, (r, x) in self.loads.items():
            ybb[bus, bus] += 1.0 / complex(r, x)
        return ybb

    @cached_property
    def _coupling(self) -> np.ndarray:
        if (self.r_c == 0).any():
            raise SingularNetwork("zero coupling resistance is not supported by the reduced solve")
        return 1.0 / self.r_c

    @cached_property
    def reduced_admittance(self) -> np.ndarray:
        """Kron-reduced admittance seen from the DG source nodes: I = Y E."""
        yc = np.diag(self._coupling).astype(complex)
        ybb = self._bus_admittance + yc
        if np.linalg.cond(ybb) > 1e12:
            raise SingularNetwork("bus admittance matrix is numerically singular")
        return yc - yc @ np.linalg.solve(ybb, yc)

    def bus_voltages(self, emf: np.ndarray) -> np.ndarray:
        yc = np.diag(self._coupling).astype(complex)
        return np.linalg.solve(self._bus_admittance + yc, yc @ emf)


def ring_network(
    n: int = 4,
    line_i: tuple[float, float] = (0.1, 1.5e-3),
    line_ii: tuple[float, float] = (0.07, 0.5e-3),
    loads: dict[int, tuple[float, float]] | None = None,
    r_c: float = 0.1,
    omega_n: float = OMEGA_NOMINAL,
) -> NetworkModel:
    """Ring of ``n`` buses alternating Line-I and Line-II (R ohm, L henry)."""
    if loads is None:
        loads = {0: (25.0, 0.0), 2: (25.0, 0.0)}
    lines = []
    for k in range(n if n > 2 else 1):
        r, l = line_i if k % 2 == 0 else line_ii
        lines.append(Line(k, (k + 1) % n, r, omega_n * l))
    return NetworkModel(n=n, lines=tuple(lines), loads=dict(loads), r_c=r_c)


def droop_outputs(params: DgParams, state: DgState) -> tuple[np.ndarray, np.ndarray]:
    """Frequency and voltage set-points with the secondary corrections added."""
    omega = params.omega_n - params.m_p * state.p_filt + state.d_omega
    v = params.v_odn - params.n_q * state.q_filt + state.d_v
    return omega, v


def solve_network(net: NetworkModel, magnitude: np.ndarray, angle: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Instantaneous (P, Q) injected by each DG source."""
    emf = np.asarray(magnitude) * np.exp(1j * np.asarray(angle))
    s = emf * np.conj(net.reduced_admittance @ emf)
    return s.real, s.imag


def power_balance(net: NetworkModel, magnitude: np.ndarray, angle: np.ndarray) -> dict[str, complex]:
    """Complex power injected, consumed by loads and lost in series elements."""
    emf = np.asarray(magnitude) * np.exp(1j * np.asarray(angle))
    vb = net.bus_voltages(emf)
    i_c = (emf - vb) * net._coupling
    injected = complex(np.sum(emf * np.conj(i_c)))
    coupling = complex(np.sum(np.abs(i_c) ** 2 * net.r_c))
    loads = sum(abs(vb[b]) ** 2 / np.conj(complex(r, x)) for b, (r, x) in net.loads.items())
    lines = sum(abs(vb[ln.frm] - vb[ln.to]) ** 2 * np.conj(1 / complex(ln.r, ln.x)) for ln in net.lines)
    return {"injected": injected, "loads": complex(loads), "lines": complex(lines), "coupling": coupling}


def step_physics(state: DgState, params: DgParams, net: NetworkModel, dt: float, t: float | None = None) -> DgState:
    """One classical RK4 step of (delta, p_filt, q_filt); d_omega, d_v held."""
    return advance_physics(state, params, net, dt, 1, t)


def advance_physics(
    state: DgState, params: DgParams, net: NetworkModel, dt: float, steps: int, t: float | None = None
) -> DgState:
    """``steps`` consecutive RK4 steps with the secondary corrections held."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    f = _physics_rhs(state, params, net)
    y = np.concatenate((state.delta, state.p_filt, state.q_filt))
    for _ in range(steps):
        y = rk4_step(f, y, dt)
    n = state.n
    new = replace(state, delta=y[:n], p_filt=y[n:2 * n], q_filt=y[2 * n:])
    new.check(t)
    return new


def _physics_rhs(state: DgState, params: DgParams, net: NetworkModel):
    n = state.n
    ybus = net.reduced_admittance
    m_p, n_q, wc = params.m_p, params.n_q, params.omega_c
    v0 = params.v_odn + state.d_v
    dw = state.d_omega

    def rhs(y: np.ndarray) -> np.ndarray:
        delta, p, q = y[:n], y[n:2 * n], y[2 * n:]
        emf = (v0 - n_q * q) * np.exp(1j * delta)
        s = emf * np.conj(ybus @ emf)
        return np.concatenate((dw - m_p * p, wc * (s.real - p), wc * (s.imag - q)))

    return rhs


def rk4_step(f, y: np.ndarray, h: float) -> np.ndarray:
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
