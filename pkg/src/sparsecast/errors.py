"""Exception hierarchy shared by every stage of the pipeline."""


class SparsecastError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ConfigError(SparsecastError, ValueError):
    exit_code = 2

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(SparsecastError, ValueError):
    exit_code = 3

    def __init__(self, message, row=None):
        self.row = row
        super().__init__(message)


class SchemaError(DataError):
    def __init__(self, message, column=None):
        self.column = column
        super().__init__(message)


class MergeError(DataError):
    pass


class BalanceError(DataError):
    pass


class MissingArtifactError(DataError):
    """A downstream command ran before the command that produces its inputs."""

    def __init__(self, path, command):
        self.path = path
        self.command = command
        super().__init__(f"missing {path}; run `sparsecast {command}` first")


class TrainingError(SparsecastError, RuntimeError):
    exit_code = 4


class ShapeError(TrainingError, ValueError):
    pass


class CompatibilityError(TrainingError):
    pass


class UsageError(TrainingError):
    pass


class ResumeError(TrainingError):
    def __init__(self, message, phase=None):
        self.phase = phase
        super().__init__(message)
