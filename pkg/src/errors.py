"""
plaincnn Error Types
Every failure the library reports has a type here. Each one extends a
builtin (ValueError / OSError / FloatingPointError) so plain `except
ValueError` callers still catch them; the CLI maps them to exit codes.
"""


class InvalidShapeError(ValueError):
    """A shape is degenerate or unusable (zero extent, odd pool input)."""


class ShapeMismatchError(ValueError):
    """Two operands (or an operand and a cache) disagree on shape."""


class InvalidParameterError(ValueError):
    """A numeric parameter is out of its allowed range."""


class ConfigError(ValueError):
    """Run configuration is malformed or names something that does not exist."""


class FormatError(ValueError):
    """A binary file does not follow its documented layout."""


class ConsistencyError(ValueError):
    """Files or sections are individually well-formed but disagree."""


class TruncatedFileError(OSError):
    """A file ended before the bytes its header promised."""

    def __init__(self, path, offset, needed):
        self.path = str(path)
        self.offset = offset
        self.needed = needed
        super().__init__(
            f"{self.path}: truncated at byte offset {offset} "
            f"(needed {needed} more bytes)"
        )


class NumericError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class TrainingDiverged(NumericError):
    """Training hit a non-finite loss. Carries the History recorded so far."""

    def __init__(self, message, history=None, epoch=None, batch=None):
        super().__init__(message)
        self.history = history
        self.epoch = epoch
        self.batch = batch
