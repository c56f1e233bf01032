from pathlib import Path
from typing import Optional, Union


class StyleHelperError(Exception):
    """Base error. `detail` is the single-line message the CLI prints."""

    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConfigError(StyleHelperError):
    exit_code = 2


class EmptyUtteranceError(StyleHelperError):
    pass


class MissingFileError(StyleHelperError, FileNotFoundError):
    exit_code = 3

    def __init__(self, path: Union[str, Path], what: str = "file"):
        super().__init__(f"{what} not found: {path}")
        self.path = Path(path)


class CorpusFormatError(StyleHelperError):
    """Malformed corpus file, positioned at the offending line."""

    def __init__(self, path: Union[str, Path], line: Optional[int], reason: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {reason}")
        self.path = Path(path)
        self.line = line
        self.reason = reason


class DatasetError(StyleHelperError):
    pass


class UnscoredPairError(DatasetError):
    pass


class UndefinedCorrelationError(StyleHelperError):
    pass


class OracleError(StyleHelperError):
    pass


class NonFiniteLossError(StyleHelperError):
    pass


class CheckpointError(StyleHelperError):
    exit_code = 4


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointNotFoundError(CheckpointError, MissingFileError):
    def __init__(self, path: Union[str, Path]):
        MissingFileError.__init__(self, path, what="checkpoint")


class ClassifierChangedError(StyleHelperError):
    """The style classifier's parameters moved during a stage that must keep it frozen."""
