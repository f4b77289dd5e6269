"""
Exception hierarchy shared by every module, plus the CLI exit-code mapping.
"""


class CipaError(Exception):
    """Base class for all errors raised by this package"""


class ContractError(CipaError, ValueError):
    """A precondition or shape contract was violated"""


class NumericFault(CipaError, ArithmeticError):
    """A computation produced NaN or Inf"""

    def __init__(self, message: str, op: str = "", batch_ids: list[str] | None = None):
        super().__init__(message)
        self.op = op
        self.batch_ids = list(batch_ids or [])


class LoadError(CipaError, IOError):
    """A dataset shard, tensor file or checkpoint could not be read"""


class ValidationError(CipaError):
    """Configuration or command-line input failed validation"""


class SuiteFailure(CipaError):
    """One or more verification suites failed"""

    def __init__(self, message: str, suites: list[str] | None = None):
        super().__init__(message)
        self.suites = list(suites or [])


EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_SUITE_FAILURE = 2
EXIT_NUMERIC_FAULT = 3


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code"""
    if isinstance(exc, NumericFault):
        return EXIT_NUMERIC_FAULT
    if isinstance(exc, SuiteFailure):
        return EXIT_SUITE_FAILURE
    return EXIT_VALIDATION
