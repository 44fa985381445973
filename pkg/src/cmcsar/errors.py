"""Exception hierarchy.

Every error raised by the package derives from :class:`CMCError`. The CLI maps
three families onto fixed exit codes: :class:`ConfigError` (2),
:class:`DataError` (3) and :class:`DivergenceError` (4).
"""


class CMCError(Exception):
    """Base class for all package errors."""


class ConfigError(CMCError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(CMCError):
    """Missing, malformed or inconsistent data on disk or in memory."""


class DivergenceError(CMCError, FloatingPointError):
    """Training produced non-finite parameters or gradients."""


class NonFiniteError(DivergenceError):
    """A tensor op produced NaN or Inf."""


class DimensionError(CMCError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(CMCError, ValueError):
    """Input outside an op's mathematical domain."""


class GeometryError(CMCError, ValueError):
    """Spatial extents that do not tile or convolve integrally."""


class DegenerateBatchError(CMCError, ValueError):
    """Batch statistics are undefined for the given batch."""


class DegenerateEmbeddingError(DomainError):
    """Zero-norm embedding passed to cosine similarity."""


class GraphError(CMCError, RuntimeError):
    """Misuse of the autodiff graph (e.g. a second backward pass)."""


class PairingError(CMCError, ValueError):
    """Positive pairing is not a perfect matching."""


class InsufficientNegativesError(CMCError, ValueError):
    """Fewer than two instances in a contrastive batch."""


class OracleScopeError(CMCError, ValueError):
    """Instance too large for the brute-force oracle."""


class RegistrationError(DataError):
    """Tiles of a co-registered set disagree on extent."""


class CoverageError(DataError):
    """A patch grid offset has no prediction."""


class ContainerError(DataError):
    """Malformed tensor container file."""


class SpecMismatchError(CMCError, ValueError):
    """Encoder specs are not compatible for a weight transplant."""
