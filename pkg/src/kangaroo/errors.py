"""Exception hierarchy shared by all modules."""


class KangarooError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(KangarooError, ValueError):
    """Unsupported or inconsistent parameter combination."""


class BackendMismatch(KangarooError):
    """Operands belong to different backends or parameter sets."""


class MissingRotationKey(KangarooError):
    """A rotation shift is not reachable from the declared key set."""


class DecryptionIntegrityError(KangarooError):
    """Noise budget exhausted or ciphertext bound to a different key."""


class UnsupportedOperation(KangarooError):
    """Operation not available on this backend."""


class SerializationError(KangarooError, ValueError):
    """Malformed container or wire data."""


class ModelError(KangarooError, ValueError):
    """Malformed tree, model document or quantization range."""


class CapacityError(KangarooError):
    """Trees do not fit in the available slots."""


class ProtocolError(KangarooError):
    """A protocol stage failed; ``stage`` names where."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.detail = message


class StateMachineError(ProtocolError):
    """Message arrived out of order or with a bad sequence number."""


class BlindingReuseError(KangarooError):
    """Single-use blinding material was used twice."""


class FramingError(KangarooError, ValueError):
    """Truncated, oversized or unknown-tag frame."""
