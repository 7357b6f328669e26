"""Exception hierarchy shared by every stage of the pipeline.

Each class carries the process exit code the CLI maps it to.
"""


class UnoqaError(Exception):
    exit_code = 1


class ConfigError(UnoqaError, ValueError):
    """Shapes, sizes or settings that do not fit together."""

    exit_code = 2


class FormatError(UnoqaError, ValueError):
    """A file on disk does not follow the expected layout."""

    exit_code = 2

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ContractError(UnoqaError):
    """Inputs violate a pipeline contract, e.g. non-outstanding training data."""

    exit_code = 3


class MissingArtifactError(ContractError):
    def __init__(self, path, command):
        super().__init__(f"missing artifact {path}; run `unoqa {command}` first")
        self.path = path
        self.command = command


class AssignmentError(ContractError):
    pass


class NumericError(UnoqaError, ArithmeticError):
    exit_code = 4


class DegenerateError(NumericError):
    """Input has no usable variation (constant scores, zero matrix, ...)."""


class TrainingError(NumericError):
    pass
