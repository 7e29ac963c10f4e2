"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or unparsable configuration. CLI exit code 2."""


class NumericError(RuntimeError):
    """Non-finite values or diverging optimization. CLI exit code 3."""


class EmptyMaskError(RuntimeError):
    """A rendered view contains no visible body pixel."""
