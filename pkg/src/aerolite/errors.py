"""Shared exception types; the CLI maps these onto process exit codes."""


class ValidationError(ValueError):
    """Bad input data or arguments (exit code 2)."""


class ProviderError(RuntimeError):
    """Caption provider / transport failure (exit code 3)."""

    def __init__(self, message: str, status: int | None = None, retries: int = 0):
        super().__init__(message)
        self.status = status
        self.retries = retries


class NumericError(RuntimeError):
    """Non-finite loss or other numeric failure (exit code 4)."""
