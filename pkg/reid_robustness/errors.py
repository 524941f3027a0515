"""Exceptions raised by the toolkit, grouped by command line exit code."""
from __future__ import annotations

from typing import Optional, Sequence, Tuple

from .const import EXIT_DATA, EXIT_INVARIANT, EXIT_USAGE


class ToolkitError(Exception):
    """Base class for all toolkit errors."""

    exit_code = EXIT_INVARIANT


class UsageError(ToolkitError, ValueError):
    """Invalid parameters or arguments."""

    exit_code = EXIT_USAGE


class DataError(ToolkitError):
    """Input files or records are unusable."""

    exit_code = EXIT_DATA


class InvariantError(ToolkitError):
    """A computation cannot produce a defined result."""

    exit_code = EXIT_INVARIANT


class EmptyManifestError(DataError):
    pass


class ManifestFormatError(DataError):
    pass


class DuplicateImageIdError(DataError):
    def __init__(self, image_id: int) -> None:
        super().__init__(f"Duplicate image_id {image_id} in manifest")
        self.image_id = image_id


class UnknownSplitError(DataError):
    def __init__(self, split: str, line: int) -> None:
        super().__init__(f"Unknown split {split!r} on manifest line {line}")
        self.split = split
        self.line = line


class SplitCountMismatchError(DataError):
    def __init__(self, split: str, expected: int, found: int) -> None:
        super().__init__(
            f"Split {split!r} has {found} records, expected {expected}"
        )
        self.split = split
        self.expected = expected
        self.found = found


class MissingImageError(DataError):
    pass


class EmbeddingFormatError(DataError):
    pass


class TruncatedFileError(DataError):
    def __init__(self, path: str, offset: int, expected: int) -> None:
        super().__init__(
            f"{path}: truncated at byte offset {offset}, expected {expected} bytes"
        )
        self.path = path
        self.offset = offset
        self.expected = expected


class NonFiniteError(DataError, ValueError):
    pass


class CountMismatchError(DataError):
    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path


class MaterializeError(DataError):
    def __init__(self, failures: Sequence[Tuple[int, str]], partial_dir: str) -> None:
        super().__init__(
            f"{len(failures)} image(s) failed, partial output left in {partial_dir}"
        )
        self.failures = list(failures)
        self.partial_dir = partial_dir


class NoValidMatchError(InvariantError):
    pass


class AllQueriesSkippedError(InvariantError):
    def __init__(self, n_queries: int) -> None:
        super().__init__(f"All {n_queries} queries have no valid gallery match")
        self.n_queries = n_queries


class ZeroVarianceError(InvariantError, ValueError):
    pass


class SupportViolationError(InvariantError, ValueError):
    def __init__(self, index: Optional[int] = None) -> None:
        where = "" if index is None else f" at index {index}"
        super().__init__(f"q is zero where p is positive{where}")
        self.index = index


class MissingEmbeddingError(DataError):
    pass
