"""Exception types shared across the simulator."""


class QkdGridError(Exception):
    """Base class for all simulator errors."""


class SingularGain(QkdGridError):
    """lambda_min(L + G) is zero: no pinned node or a disconnected graph."""


class NoHealthyNode(QkdGridError):
    """Every DG is flagged, so no trustworthy reference remains."""


class SingularNetwork(QkdGridError):
    """The network admittance system cannot be solved."""


class Diverged(QkdGridError):
    """A state went non-finite or exceeded the divergence bound."""

    def __init__(self, message: str, t: float | None = None):
        super().__init__(message)
        self.t = t


class EmptySiftedKey(QkdGridError):
    """Basis sifting kept no positions."""


class Undeliverable(QkdGridError):
    """Not enough key material on a link to encrypt a frame."""


class Stale(QkdGridError):
    """No decryptable frame arrived; the receiver holds its last value."""


class ConfigError(QkdGridError):
    """Invalid scenario configuration."""
