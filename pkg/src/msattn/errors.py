class InvalidConfig(ValueError):
    """A configuration value violates its documented constraints."""


class InvalidInput(ValueError):
    """Input arrays or tokens are malformed (shape, dtype, range, non-finite)."""


class NonFiniteLoss(RuntimeError):
    """Training produced a NaN/inf loss; carries a diagnostic payload."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
