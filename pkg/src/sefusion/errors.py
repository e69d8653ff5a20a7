"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class SEFusionError(Exception):
    exit_code = 1


class UsageError(SEFusionError, ValueError):
    exit_code = 1


class ShapeError(UsageError):
    """Operand shapes do not conform."""


class DataFormatError(SEFusionError, ValueError):
    exit_code = 2


class PriorError(SEFusionError, ValueError):
    """A class prior is degenerate (some class has zero probability)."""

    exit_code = 2


class NumericalError(SEFusionError, ArithmeticError):
    exit_code = 3
