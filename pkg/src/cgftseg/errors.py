"""Exception hierarchy shared by all modules.

Each class maps onto one exit code of the command-line tool.
"""


class CgftError(Exception):
    exit_code = 1


class InvalidInput(CgftError, ValueError):
    """Malformed data: non-finite pixels, mismatched shapes, non-binary masks."""

    exit_code = 3


class MissingData(CgftError, FileNotFoundError):
    """A required file, mask or dataset split is absent or unreadable."""

    exit_code = 2


class InvalidConfig(CgftError, ValueError):
    """A configuration value is out of its allowed range."""

    exit_code = 2


class InvalidState(CgftError, RuntimeError):
    exit_code = 3


class InsufficientData(CgftError, ValueError):
    exit_code = 2


class HeldOutAccess(InvalidState):
    """Raised when training code asks for a mask that is reserved for evaluation."""

    exit_code = 2


class NumericalFailure(CgftError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, step=None, components=None):
        super().__init__(message)
        self.step = step
        self.components = dict(components or {})
