"""Exception hierarchy shared across the package.

Container errors are split into distinct kinds so callers (and the CLI exit
code mapping) can tell a malformed file from a version skew from a short
read.
"""


class RadError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(RadError):
    """An input violates a documented invariant (CLI exit code 2)."""


class ContractViolation(RadError):
    """A verified mathematical contract did not hold (CLI exit code 3)."""


class ContainerError(RadError):
    """A container file is structurally unreadable."""


class BadMagicError(ContainerError):
    """The stream does not start with the expected magic bytes."""


class VersionMismatchError(ContainerError):
    """The container format version is not supported."""


class TruncatedTensorError(ContainerError):
    """The payload ends before a directory entry's tensor does."""
