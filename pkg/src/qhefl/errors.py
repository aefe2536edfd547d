"""Exception types shared across the package."""


class QheflError(Exception):
    """Base class for all package errors."""


class ContractViolation(QheflError, ValueError):
    """An operation was called with incompatible operands (domain, level, shape...)."""


class ParameterError(QheflError, ValueError):
    """Invalid encryption or model parameters."""


class CapacityError(QheflError, ValueError):
    """Too many values for the available slots / qubits."""


class LevelExhausted(QheflError):
    """No prime left to drop from the modulus chain."""


class ParseError(QheflError):
    """A binary frame could not be decoded."""


class TruncatedFrame(ParseError):
    pass


class ChecksumMismatch(ParseError):
    pass


class UnknownKind(ParseError):
    pass


class ContextMismatch(ParseError):
    """Serialized object was produced under different encryption parameters."""


class ProtocolError(QheflError):
    """Federated protocol invariant broken (manifest, round or client mismatch)."""


class ConfigError(QheflError, ValueError):
    pass


class InputError(QheflError, ValueError):
    pass


class NoPeriodError(QheflError):
    """A trace carries no detectable periodicity."""


class ChannelClosed(QheflError):
    pass


class DeliveryError(QheflError):
    pass


class IntegrityWarning(UserWarning):
    """Decrypted values look like garbage (likely a wrong key)."""


class UndefinedMetric(QheflError, ValueError):
    """A metric is undefined for the given labels (e.g. AUC with one class)."""


class RecvTimeout(DeliveryError, TimeoutError):
    """No message arrived within the receive timeout."""


class RunFailed(QheflError):
    """An experiment stage failed; ``round`` records where."""

    def __init__(self, message, round_=None):
        super().__init__(message)
        self.round = round_
