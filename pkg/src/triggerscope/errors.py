"""Exception hierarchy shared across the toolkit."""


class ForensicsError(Exception):
    """Base class for every error raised by this package."""


class InputError(ForensicsError, ValueError):
    """A caller-supplied value violates an operation's precondition."""


class ConfigError(ForensicsError):
    """A configuration file or architecture description is invalid."""


class GraphError(ForensicsError):
    """A computation-graph contract was violated (e.g. non-scalar loss)."""


class NumericError(ForensicsError):
    """A NaN/Inf appeared during a forward or backward pass."""


class CheckpointFormatError(ForensicsError):
    """A checkpoint file has a bad magic, version, or header."""


class CheckpointCorruptError(CheckpointFormatError):
    """A checkpoint file is truncated or has a malformed payload."""


class StageError(ForensicsError):
    """A pipeline stage failed; carries the stage tag for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
