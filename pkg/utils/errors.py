"""Exception hierarchy shared by the workflows and the CLI.

Each error carries the process exit code the CLI returns for it.
"""


class PipelineError(Exception):
    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConfigError(PipelineError, ValueError):
    exit_code = 2


class DependencyError(PipelineError):
    exit_code = 3


class DataError(PipelineError, ValueError):
    exit_code = 4


class InsufficientDataError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, detail: str, row: int | None = None):
        message = f"row {row}: {detail}" if row is not None else detail
        super().__init__(message)
        self.row = row


class DomainError(DataError):
    pass


class ShapeError(DataError):
    pass


class BatchSizeError(DataError):
    pass


class DivisionHazardError(DataError):
    pass


class ModelFormatError(DataError):
    pass
