"""Exception hierarchy.

Everything raised on purpose by this package derives from :class:`LdcError`.
The CLI maps the three sub-families to process exit codes: configuration
errors exit 2, data errors exit 3, numeric failures exit 4.
"""


class LdcError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(LdcError):
    """Invalid configuration value (bad flag, bad hyperparameter, bad spec)."""


class ShapeError(ConfigError):
    """Array dimensions do not match what an operation requires."""


class ContractError(ConfigError):
    """A runtime value violates an operation's stated precondition."""


class DataError(LdcError):
    """A dataset, bundle, or model file is missing, malformed, or inconsistent."""


class BundleFormatError(DataError):
    """The on-disk container bytes cannot be decoded."""


class BadMagicError(BundleFormatError):
    """File does not start with the expected magic bytes."""


class FormatVersionError(BundleFormatError):
    """File declares a container version this reader does not understand."""


class TruncatedError(BundleFormatError):
    """File ends before all declared payload bytes were read."""


class TrailingDataError(BundleFormatError):
    """File contains bytes past the declared payload."""


class BundleValidationError(DataError):
    """Decoded container violates a bundle invariant (labels, dims, counts)."""


class InsufficientDataError(DataError):
    """A class has fewer records than the episode sampler needs."""


class NumericError(LdcError):
    """A numeric operation produced or received non-finite values."""


class DegenerateVectorError(NumericError):
    """Cosine similarity was asked about a zero-norm vector."""


class UndefinedCorrelationError(NumericError):
    """Correlation requested between vectors with zero variance."""


def shape_check(condition: bool, message: str) -> None:
    if not condition:
        raise ShapeError(message)
