# errors.py
from __future__ import annotations

from typing import Sequence


class ToolkitError(Exception):
    """Base class for every error raised by the toolkit."""


class InvalidArgumentError(ToolkitError, ValueError):
    """A call received arguments it cannot work with (shapes, ranges, dims)."""


class InvalidInputError(ToolkitError, ValueError):
    """Input data is unusable: non-finite pixels, undersized sources, empty dirs."""


class ConfigError(ToolkitError, ValueError):
    """Configuration file or override problem."""


class ManifestError(InvalidInputError):
    """Dataset manifest is malformed or has an unsupported version."""


class DataError(InvalidInputError):
    """Files referenced by a manifest are missing or inconsistent."""


class CheckpointError(ToolkitError):
    """Checkpoint file cannot be loaded."""


class CheckpointVersionError(CheckpointError):
    """Bad magic bytes or unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the declared payload does."""


class CheckpointShapeError(CheckpointError):
    """Payload does not match the architecture declared in the header."""


class ExtractorLoadError(ToolkitError):
    """Feature-extractor weight file is unreadable or mismatches the declared stages."""


class NonFiniteLossError(ToolkitError, RuntimeError):
    def __init__(self, step: int, batch_ids: Sequence[str], value: float):
        self.step = step
        self.batch_ids = list(batch_ids)
        self.value = value
        super().__init__(
            f"Non-finite loss {value} at step {step} (batch: {', '.join(self.batch_ids)})"
        )
