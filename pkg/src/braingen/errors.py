"""Exception types shared across the package."""


class BraingenError(Exception):
    pass


class DimensionError(BraingenError):
    """Operand shapes do not conform."""


class NumericError(BraingenError):
    """Non-finite values or other numeric failure."""


class DeterminismError(BraingenError):
    """A function expected to be deterministic returned differing values."""


class VocabularyError(BraingenError):
    """Token id outside the vocabulary."""


class ContextLengthError(BraingenError):
    """Input sequence longer than the model's context window."""


class DataError(BraingenError):
    """Empty or inconsistent dataset."""


class ConfigError(BraingenError):
    """Bad configuration value or mismatched checkpoint."""
