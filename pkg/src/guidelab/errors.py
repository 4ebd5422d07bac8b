"""Exception hierarchy shared across the package."""


class GuidelabError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(GuidelabError):
    """Invalid configuration: bad key, bad value, or violated invariant."""


class DomainError(GuidelabError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class TrainingError(GuidelabError):
    """Training diverged or received a non-finite gradient."""


class SamplingError(GuidelabError):
    """ODE integration produced a non-finite state."""


class MetricError(GuidelabError):
    """A metric is undefined for the given inputs (e.g. empty sample set)."""


class CheckpointError(GuidelabError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    """The file does not start with the checkpoint magic bytes."""


class VersionError(CheckpointError):
    """The checkpoint format version is not recognized."""


class TruncatedCheckpointError(CheckpointError):
    """The file ended before the declared parameter blob was read."""


class ArchitectureMismatchError(CheckpointError):
    """Checkpoint architecture does not match the requested configuration."""


class UsageError(GuidelabError):
    """Command-line flags are inconsistent with the requested operation."""
