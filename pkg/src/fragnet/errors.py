"""Exception taxonomy and process exit codes shared across the package."""


class FragnetError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(FragnetError):
    """Invalid configuration, arguments, or violated preconditions (exit 2)."""


class DataError(FragnetError):
    """Missing, malformed, or degenerate input data (exit 3)."""


class ConvergenceError(FragnetError):
    """An iterative solver exhausted its iteration budget (exit 4)."""

    def __init__(self, message: str, dual_gap: float | None = None, n_iter: int | None = None):
        super().__init__(message)
        self.dual_gap = dual_gap
        self.n_iter = n_iter


class IngestError(DataError):
    """Fatal problem while fetching or assembling raw TVL data."""


class MissingProtocolError(IngestError):
    """A requested protocol slug does not exist upstream or in the cache."""

    def __init__(self, slug: str, message: str | None = None):
        super().__init__(message or f"protocol not found: {slug!r}")
        self.slug = slug


class SnapshotError(DataError):
    """A snapshot file is unreadable, truncated, or has the wrong schema."""


EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit-code contract."""
    if isinstance(exc, ValidationError):
        return EXIT_VALIDATION
    if isinstance(exc, ConvergenceError):
        return EXIT_CONVERGENCE
    if isinstance(exc, DataError):
        return EXIT_DATA
    return 1
