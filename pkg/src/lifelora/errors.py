"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class LifeLoraError(Exception):
    exit_code = 1


class UsageError(LifeLoraError, ValueError):
    exit_code = 2


class ShapeError(UsageError):
    pass


class CompatibilityError(LifeLoraError):
    exit_code = 3


class FormatError(LifeLoraError):
    exit_code = 3


class CorruptionError(FormatError):
    pass


class NumericError(LifeLoraError, ArithmeticError):
    exit_code = 4
