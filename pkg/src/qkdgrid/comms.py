"""Measurement frames, one-time-pad encryption and node-level injection.

Wire layout of a frame, most-significant bit first::

    [sender:8][seq:32][omega:64][P:64][Q:64]

``sender`` is the 1-based DG id, ``seq`` an unsigned counter (mod 2**32),
and each measurement an IEEE-754 binary64 in big-endian order. The 40-bit
header travels in clear; only the last 192 bits (the payload) are XORed with
key bits. There is no integrity tag, so a wrong key decodes to garbage.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import Stale, Undeliverable

PAYLOAD_BITS = 192
HEADER_BITS = 40
FRAME_BITS = HEADER_BITS + PAYLOAD_BITS
_PAYLOAD = struct.Struct(">ddd")
_HEADER = struct.Struct(">BI")


@dataclass(frozen=True)
class NodeAttack:
    """Additive bias on the outgoing measurements of compromised DGs."""

    targets: frozenset[int]
    bias: tuple[float, float, float]
    t_start: float = 0.0
    t_end: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "targets", frozenset(int(x) for x in self.targets))
        if len(self.bias) != 3:
            raise ValueError("bias must be (d_omega, d_P, d_Q)")
        if self.t_end is not None and self.t_end < self.t_start:
            raise ValueError("attack window ends before it starts")

    def active_at(self, t: float) -> bool:
        return t >= self.t_start and (self.t_end is None or t < self.t_end)


@dataclass(frozen=True)
class MeasurementFrame:
    sender: int
    seq: int
    payload: bytes

    def __post_init__(self):
        if len(self.payload) * 8 != PAYLOAD_BITS:
            raise ValueError("payload must be 192 bits")
        if not 0 <= self.sender < 256:
            raise ValueError("sender id does not fit in 8 bits")

    def to_bits(self) -> np.ndarray:
        raw = _HEADER.pack(self.sender, self.seq % 2**32) + self.payload
        return np.unpackbits(np.frombuffer(raw, dtype=np.uint8))

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> MeasurementFrame:
        if bits.shape != (FRAME_BITS,):
            raise ValueError(f"frame must be {FRAME_BITS} bits")
        raw = np.packbits(bits.astype(np.uint8)).tobytes()
        sender, seq = _HEADER.unpack(raw[:5])
        return cls(sender, seq, raw[5:])


def encode_frame(
    sender: int,
    omega: float,
    p: float,
    q: float,
    attacks: NodeAttack | list[NodeAttack] | None = None,
    t: float = 0.0,
    seq: int = 0,
) -> MeasurementFrame:
    """Serialize (omega, P, Q) of DG ``sender`` (0-based), biased if it is compromised at ``t``."""
    if attacks is None:
        attacks = []
    elif isinstance(attacks, NodeAttack):
        attacks = [attacks]
    for atk in attacks:
        if sender in atk.targets and atk.active_at(t):
            omega += atk.bias[0]
            p += atk.bias[1]
            q += atk.bias[2]
    return MeasurementFrame(sender + 1, seq, _PAYLOAD.pack(omega, p, q))


def decode_payload(payload: bytes) -> tuple[float, float, float]:
    return _PAYLOAD.unpack(payload)


@dataclass
class KeyBuffer:
    """Paired transmitter/receiver key FIFOs for one directed link.

    Both sides receive their own sifted bits from each accepted session.
    When ``capacity`` is exceeded the oldest bits are dropped so frames are
    always protected by the freshest key material. Every bit is handed out
    at most once per side.
    """

    capacity: int = 2 * PAYLOAD_BITS
    tx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))
    rx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))
    produced: int = 0
    dropped: int = 0
    consumed_tx: int = 0
    consumed_rx: int = 0

    def push(self, tx_bits: np.ndarray, rx_bits: np.ndarray) -> None:
        if tx_bits.shape != rx_bits.shape:
            raise ValueError("tx and rx key material must have equal length")
        if self.tx.shape != self.rx.shape:
            raise RuntimeError("key buffers out of step; push only between whole frames")
        self.produced += tx_bits.shape[0]
        tx = np.concatenate((self.tx, tx_bits.astype(np.uint8)))
        rx = np.concatenate((self.rx, rx_bits.astype(np.uint8)))
        excess = tx.shape[0] - self.capacity
        if excess > 0:
            tx, rx = tx[excess:], rx[excess:]
            self.dropped += excess
        self.tx, self.rx = tx, rx

    @property
    def available(self) -> int:
        return self.tx.shape[0]

    def take_tx(self, n: int) -> np.ndarray:
        if self.tx.shape[0] < n:
            raise Undeliverable(f"{self.tx.shape[0]} key bits available, {n} needed")
        out, self.tx = self.tx[:n], self.tx[n:]
        self.consumed_tx += n
        return out

    def take_rx(self, n: int) -> np.ndarray:
        if self.rx.shape[0] < n:
            raise Stale(f"{self.rx.shape[0]} receiver key bits available, {n} needed")
        out, self.rx = self.rx[:n], self.rx[n:]
        self.consumed_rx += n
        return out


def _xor(payload: bytes, key_bits: np.ndarray) -> bytes:
    pad = np.packbits(key_bits)
    return (np.frombuffer(payload, dtype=np.uint8) ^ pad).tobytes()


def otp_encrypt(payload: bytes, keys: KeyBuffer) -> bytes:
    """XOR the payload with the next 192 transmitter key bits."""
    return _xor(payload, keys.take_tx(PAYLOAD_BITS))


def otp_decrypt(ciphertext: bytes, keys: KeyBuffer) -> bytes:
    return _xor(ciphertext, keys.take_rx(PAYLOAD_BITS))


def deliver(ciphertext: bytes | None, keys: KeyBuffer) -> tuple[float, float, float]:
    """Decrypt with the receiver's key bits and decode the triple.

    ``None`` stands for a frame that could not be sent (key starvation); the
    receiver then has nothing to decode and must hold its last value.
    """
    if ciphertext is None:
        raise Stale("no frame delivered on this link")
    return decode_payload(otp_decrypt(ciphertext, keys))
