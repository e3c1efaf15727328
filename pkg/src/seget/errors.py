"""Exception classes shared across the toolkit.

The CLI maps these onto its exit-code classes: config errors -> 1,
data/format errors -> 2, numeric/runtime errors -> 3, OSError -> 4.
"""


class SegetError(Exception):
    """Base class for toolkit errors."""


class ConfigError(SegetError):
    """Invalid configuration text, unknown keys, or bad preset names."""


class DataFormatError(SegetError):
    """Malformed input data: MRC/PGM parse failures, shape mismatches."""


class NumericError(SegetError):
    """Runtime numeric failures: non-finite losses, gradient-check failures."""
