"""
Exception hierarchy shared by every module.

Each error carries a short category (printed by the CLI as
``ERROR [category]: message``) and the process exit code used for it.
"""


class AgeFairError(Exception):
    category = 'error'
    exit_code = 1


class UsageError(AgeFairError):
    category = 'usage'
    exit_code = 2


class InputError(AgeFairError):
    category = 'input'
    exit_code = 3


class FormatError(InputError):
    category = 'format'

    def __init__(self, message, row=None, column=None):
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column '{column}'")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.row = row
        self.column = column


class ConfigError(InputError):
    category = 'config'

    def __init__(self, message, key=None):
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)
        self.key = key


class NumericError(AgeFairError):
    category = 'numeric'
    exit_code = 4

    def __init__(self, message, **context):
        if context:
            details = ', '.join(f"{k}={v}" for k, v in context.items())
            message = f"{message} [{details}]"
        super().__init__(message)
        self.context = context


class DimensionError(AgeFairError):
    category = 'dimension'
    exit_code = 5


class StateError(AgeFairError):
    category = 'state'
    exit_code = 5


class DegenerateGroupError(AgeFairError):
    category = 'degenerate'
    exit_code = 6

    def __init__(self, message, group=None):
        super().__init__(message)
        self.group = group


class DataWarning(UserWarning):
    """Recoverable data anomaly: dropped rows, constant columns, degenerate folds."""
