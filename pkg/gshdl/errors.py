"""Exception hierarchy for G-SHDL.

Every error raised on purpose by the library derives from :class:`GshdlError`
and carries a short machine-readable ``category`` that the command line prints
on stderr.
"""

from typing import Any, Optional


class GshdlError(Exception):
    """Base class for all library errors."""

    category = "error"


class ConfigError(GshdlError):
    """Invalid configuration value or inconsistent options."""

    category = "config"


class DimensionError(GshdlError):
    """Array or kernel shape violates an operation's contract."""

    category = "dimension"


class DataError(GshdlError):
    """Input data is non-finite, empty, or otherwise unusable."""

    category = "data"


class PreconditionError(GshdlError):
    """A documented precondition does not hold (e.g. asymmetric matrix)."""

    category = "precondition"


class NumericalError(GshdlError):
    """A computation diverged or produced non-finite values.

    Args:
        message: Description of the failure
        last_iterate: Last finite state reached before the failure, if any
    """

    category = "numerical"

    def __init__(self, message: str, last_iterate: Optional[Any] = None):
        super().__init__(message)
        self.last_iterate = last_iterate


class IngestionError(GshdlError):
    """A dataset record could not be loaded or validated."""

    category = "ingestion"

    def __init__(self, message: str, record: Optional[str] = None):
        if record is not None:
            message = f"{record}: {message}"
        super().__init__(message)
        self.record = record


class ContainerError(GshdlError):
    """Malformed chunked container file."""

    category = "container"


class BadMagicError(ContainerError):
    """File does not start with the container magic."""


class ChecksumError(ContainerError):
    """A chunk's CRC-32 does not match its payload."""

    def __init__(self, message: str, chunk: str):
        super().__init__(message)
        self.chunk = chunk


class VersionError(ContainerError):
    """Container was written by a newer format version."""


class RenderError(GshdlError):
    """Overlay rendering failed (unknown label, bad alpha)."""

    category = "render"
