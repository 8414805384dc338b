"""Exception hierarchy shared across the package.

Every error raised by embattr derives from :class:`EmbattrError`, so callers
can catch one base class at pipeline boundaries. The CLI maps subtrees to
exit codes (see ``cli.py``).
"""

from __future__ import annotations


class EmbattrError(Exception):
    """Base class for all embattr errors."""


class ConfigError(EmbattrError):
    """Invalid configuration: bad keys, missing files, malformed values."""


class FormatError(EmbattrError):
    """A binary or text artifact does not match its documented layout."""


class ConsistencyError(EmbattrError):
    """Structurally valid inputs that contradict each other."""


class DataError(EmbattrError):
    """Numerically or semantically invalid data (NaN rows, zero norms, ...)."""


class EmptyCaseError(EmbattrError):
    """A query pool or candidate set came out empty."""


class ShapeError(EmbattrError):
    """Array dimensions do not match what an operation requires."""


class BatchTooSmall(EmbattrError):
    """Contrastive losses need at least two pairs per batch."""


class MetricError(EmbattrError):
    """A retrieval metric was asked for an undefined quantity."""


class DegenerateDistribution(EmbattrError):
    """All influence-score numerators were clipped to zero."""


class NumericError(EmbattrError):
    """Training or fitting hit NaN/inf and aborted."""
