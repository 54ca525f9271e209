"""Exception types raised across the package."""


class MTPError(Exception):
    """Base class for all package errors."""


class ShapeError(MTPError, ValueError):
    """Array dimensions do not line up."""


class ParameterError(MTPError, ValueError):
    """A scalar parameter is outside its allowed range."""


class CapacityError(MTPError):
    """A sequence would exceed ``max_seq_len``."""


class InputError(MTPError, ValueError):
    """Token ids or other inputs are out of range."""


class ContractError(MTPError):
    """A caller broke an alignment or ordering contract."""


class CheckpointError(MTPError):
    """A checkpoint file is malformed or does not match its config."""


class TrainingError(MTPError):
    """Training produced a non-finite loss."""


class SamplingError(MTPError):
    """No token survived the sampling filters."""


class StateError(MTPError):
    """An operation was called on a stream in the wrong state."""


class ConfigurationError(MTPError, ValueError):
    """A configuration violates a structural precondition (e.g. COLA)."""


class ScoringError(MTPError, ValueError):
    """A sequence cannot be scored under the reference generator."""


class MissingArtifactError(MTPError):
    """A checkpoint or dataset the command depends on does not exist."""


class InvariantViolation(MTPError):
    """An audit found a decoding trace that breaks the acceptance rules."""
