"""Exception types shared across the package.

Everything raised deliberately by the library derives from
:class:`HyperfieldError`, so callers (notably the CLI) can separate domain
failures from programming errors.
"""


class HyperfieldError(Exception):
    """Base class for domain failures raised by this package."""


class FormatError(HyperfieldError):
    """A file is malformed or internally inconsistent."""


class ValidationError(HyperfieldError):
    """Arguments violate an operation's contract."""


class GeometryError(HyperfieldError):
    """Degenerate geometry prevents a well-posed solve."""


class EmptyResultError(HyperfieldError):
    """An operation produced no usable output (e.g. an empty mask)."""


class TrainingDivergedError(HyperfieldError):
    """Optimization hit a non-finite loss and was aborted."""
