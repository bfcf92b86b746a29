"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A configuration value is out of its documented range or unknown."""


class CheckpointError(IOError):
    """Base class for checkpoint read/write failures."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint payload does not match its recorded content hash."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written with an incompatible format version."""

    def __init__(self, kind: str, found: int, expected: int):
        super().__init__(
            f"{kind} checkpoint version {found} is not supported "
            f"(expected version {expected})"
        )
        self.found = found
        self.expected = expected


class RemoteEnhancerError(IOError):
    """Remote enhancement service failed after all retries."""


class RemoteProtocolError(RemoteEnhancerError):
    """Remote enhancement service returned a malformed payload."""


class RunLockedError(RuntimeError):
    """Another process holds the lock on this run directory."""
