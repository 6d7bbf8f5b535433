"""Exception types shared across the package."""


class FormatError(ValueError):
    """Malformed content in a data, tree, propensity, or model file.

    Carries the 1-based line number of the offending line when known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
