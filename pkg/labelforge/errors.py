"""Exception hierarchy shared by the library and the command-line front-end."""

from pathlib import Path
from typing import Optional, Union


class LabelForgeError(Exception):
    """Base class for all errors raised by labelforge."""


class ConfigError(LabelForgeError, ValueError):
    """Invalid configuration or parameter value."""


class DataError(LabelForgeError, ValueError):
    """Input data violates a documented precondition."""


class FormatError(DataError):
    """Malformed file on disk."""

    def __init__(
        self,
        message: str,
        path: Optional[Union[str, Path]] = None,
        offset: Optional[int] = None,
    ):
        self.path = str(path) if path is not None else None
        self.offset = offset
        details = []
        if self.path is not None:
            details.append(f"file {self.path}")
        if offset is not None:
            details.append(f"byte offset {offset}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)


class GeometryError(DataError):
    """Invalid camera calibration or geometry."""


class VocabularyError(DataError):
    """Vocabulary, prompt manifest and embeddings do not agree."""


class CapacityError(DataError):
    """A 16-bit id space (semantic or instance) would overflow."""
