"""Exception taxonomy shared by every module.

The CLI maps these onto its exit codes, so the hierarchy is part of the
public contract.
"""


class StateTuneError(Exception):
    """Base class for all library errors."""


class ShapeError(StateTuneError, ValueError):
    """Operand dimensions do not agree."""


class InputError(StateTuneError, ValueError):
    """An argument is outside its documented domain."""


class ConfigurationError(StateTuneError, ValueError):
    """A configuration value violates an invariant."""


class NumericalError(StateTuneError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class StateOverflowError(NumericalError):
    """State Frobenius norm exceeded the configured ceiling."""

    def __init__(self, message, timestep=None, norm=None):
        super().__init__(message, index=timestep)
        self.timestep = timestep
        self.norm = norm


class DivergenceError(StateTuneError):
    """Training produced a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class FormatError(StateTuneError, ValueError):
    """A persisted file is malformed."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class DigestError(FormatError):
    """Stored and recomputed content digests differ."""


class TeacherError(StateTuneError):
    """Base class for teacher oracle failures."""


class TeacherTransportError(TeacherError):
    """Timeout or connection failure; the call may be retried."""


class TeacherProtocolError(TeacherError):
    """The teacher answered with a malformed payload."""
