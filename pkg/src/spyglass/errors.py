"""Exception types shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters more than the message wording: UsageError -> 1, DataFormatError -> 2,
NumericError -> 3.
"""


class SpyglassError(Exception):
    """Base class for errors raised by this package."""


class UsageError(SpyglassError):
    """Bad command line, bad config key, or inconsistent options."""


class DataFormatError(SpyglassError):
    """Malformed manifest, image file, or checkpoint."""


class NumericError(SpyglassError):
    """Non-finite loss or gradient encountered during optimization."""
