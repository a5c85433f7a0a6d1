"""BB84 key establishment over one directed link, ideal-qubit abstraction.

A qubit is a (basis, bit) pair. Measuring in the preparation basis returns
the bit; measuring in the conjugate basis returns a uniformly random bit
(|<+|0>|^2 = 1/2) and collapses the state into the measurement basis.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySiftedKey


class Basis(enum.IntEnum):
    RECTILINEAR = 0  # |0>, |1>
    DIAGONAL = 1  # |+>, |->


class Mode(str, enum.Enum):
    BASELINE = "baseline"
    FORTIFIED = "fortified"


@dataclass(frozen=True)
class Qubit:
    basis: Basis
    bit: int

    def __post_init__(self):
        if self.bit not in (0, 1):
            raise ValueError("qubit bit must be 0 or 1")
        object.__setattr__(self, "basis", Basis(self.basis))


def measure(q: Qubit, basis: Basis, rng: np.random.Generator) -> int:
    if Basis(basis) == q.basis:
        return q.bit
    return int(rng.integers(0, 2))


@dataclass(frozen=True)
class EveModel:
    """Intercept-resend eavesdropper, active on ``[t_start, t_end)``."""

    kind: str = "none"
    p_intercept: float = 1.0
    t_start: float = 0.0
    t_end: float | None = None

    def __post_init__(self):
        if self.kind not in ("none", "intercept_resend"):
            raise ValueError(f"unknown eavesdropper kind {self.kind!r}")
        if not 0.0 <= self.p_intercept <= 1.0:
            raise ValueError("p_intercept must lie in [0, 1]")
        if self.t_end is not None and self.t_end < self.t_start:
            raise ValueError("eavesdropping window ends before it starts")

    def active_at(self, t: float) -> bool:
        if self.kind == "none" or self.p_intercept == 0.0:
            return False
        return t >= self.t_start and (self.t_end is None or t < self.t_end)


NO_EVE = EveModel()


@dataclass(frozen=True)
class QkdSessionResult:
    """Outcome of one session.

    ``sifted_bits_tx``/``sifted_bits_rx`` are the key bits kept after sifting
    and, in baseline mode, after removing the publicly compared sample.
    """

    sifted_bits_tx: np.ndarray
    sifted_bits_rx: np.ndarray
    qber_estimate: float | None
    sacrificed: int
    discrepancies: int
    n_raw: int
    n_sifted: int
    intercepted: int = 0
    key_errors: int = field(init=False)

    def __post_init__(self):
        if self.sifted_bits_tx.shape != self.sifted_bits_rx.shape:
            raise ValueError("sifted sequences must have equal length")
        object.__setattr__(
            self, "key_errors", int(np.count_nonzero(self.sifted_bits_tx != self.sifted_bits_rx))
        )

    @property
    def sift_fraction(self) -> float:
        return self.n_sifted / self.n_raw


def run_session(
    n_raw: int,
    eve: EveModel | None,
    p_noise: float,
    mode: Mode | str,
    rng: np.random.Generator,
    sacrifice: float = 0.25,
) -> QkdSessionResult:
    """Prepare, transmit, measure and sift ``n_raw`` qubits."""
    if n_raw < 16:
        raise ValueError("n_raw must be at least 16")
    mode = Mode(mode)
    draws = rng.integers(0, 2, size=(6, n_raw), dtype=np.uint8)
    tx_basis, tx_bit, eve_basis, eve_coin, rx_basis, rx_coin = draws

    ch_basis, ch_bit = tx_basis, tx_bit
    intercepted = 0
    if eve is not None and eve.kind == "intercept_resend" and eve.p_intercept > 0:
        if eve.p_intercept >= 1.0:
            hit = np.ones(n_raw, dtype=bool)
        else:
            hit = rng.random(n_raw) < eve.p_intercept
        eve_bit = np.where(eve_basis == tx_basis, tx_bit, eve_coin)
        ch_basis = np.where(hit, eve_basis, tx_basis)
        ch_bit = np.where(hit, eve_bit, tx_bit)
        intercepted = int(hit.sum())
    if p_noise > 0:
        ch_bit = ch_bit ^ (rng.random(n_raw) < p_noise).astype(np.uint8)

    rx_bit = np.where(rx_basis == ch_basis, ch_bit, rx_coin)
    keep = tx_basis == rx_basis
    key_tx, key_rx = tx_bit[keep], rx_bit[keep]
    n_sifted = key_tx.shape[0]
    if n_sifted == 0:
        raise EmptySiftedKey("no positions survived basis sifting")

    if mode is Mode.FORTIFIED:
        return QkdSessionResult(key_tx, key_rx, None, 0, 0, n_raw, n_sifted, intercepted)

    zeta = max(1, int(round(sacrifice * n_sifted)))
    if zeta >= n_sifted:
        raise EmptySiftedKey("sifted key too short to sacrifice a sample")
    sample = np.zeros(n_sifted, dtype=bool)
    sample[rng.choice(n_sifted, size=zeta, replace=False)] = True
    e_d = int(np.count_nonzero(key_tx[sample] != key_rx[sample]))
    return QkdSessionResult(
        key_tx[~sample], key_rx[~sample], e_d / zeta, zeta, e_d, n_raw, n_sifted, intercepted
    )


def baseline_accept(result: QkdSessionResult, threshold: float) -> bool:
    """Accept the key unless the sampled QBER is strictly above ``threshold``."""
    if result.qber_estimate is None:
        raise ValueError("session carries no QBER estimate (fortified mode)")
    return result.qber_estimate <= threshold


@dataclass
class QberStats:
    sessions: int
    n_raw: int
    sifted: int
    sacrificed: int
    discrepancies: int
    key_bits: int
    key_errors: int

    @property
    def sift_fraction(self) -> float:
        return self.sifted / (self.sessions * self.n_raw)

    @property
    def qber(self) -> float:
        return self.discrepancies / self.sacrificed

    @property
    def qber_sigma(self) -> float:
        """Binomial standard deviation of the pooled estimate at its own mean."""
        p = self.qber
        return float(np.sqrt(p * (1 - p) / self.sacrificed))

    @property
    def key_error_rate(self) -> float:
        return self.key_errors / self.key_bits


def qber_statistics(
    sessions: int,
    n_raw: int,
    eve: EveModel | None,
    rng: np.random.Generator,
    p_noise: float = 0.0,
    sacrifice: float = 0.25,
) -> QberStats:
    """Pool ``sessions`` baseline sessions into sift-fraction and QBER totals."""
    st = QberStats(sessions, n_raw, 0, 0, 0, 0, 0)
    for _ in range(sessions):
        r = run_session(n_raw, eve, p_noise, Mode.BASELINE, rng, sacrifice)
        st.sifted += r.n_sifted
        st.sacrificed += r.sacrificed
        st.discrepancies += r.discrepancies
        st.key_bits += r.sifted_bits_tx.shape[0]
        st.key_errors += r.key_errors
    return st
