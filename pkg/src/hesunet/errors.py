"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so raising the right type
matters: configuration problems must be detected before any output is
written, numeric failures must carry enough context to locate the stage
that produced them, and file-format problems must never yield a partial
sample.
"""


class ConfigError(ValueError):
    """Invalid configuration value, flag, or config-file entry."""


class NonFiniteError(ArithmeticError):
    """A tensor that must be finite contains NaN or Inf."""


class DataFormatError(ValueError):
    """A file on disk does not match its declared format."""
