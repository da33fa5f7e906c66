"""Exception types shared across the package."""


class ParseError(ValueError):
    """A CSV or JSON input could not be parsed; message names row/column."""


class InvalidSelectionError(ValueError):
    """A band selection refers to indices outside the spectral range."""


class DegeneratePixelError(RuntimeError):
    """Per-pixel unmixing hit a degenerate normalization or zero denominator."""


class DegenerateConfigurationError(RuntimeError):
    """Random generation failed to satisfy its constraints after many retries."""
