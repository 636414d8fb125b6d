"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PoseSmoothError(Exception):
    exit_code = 1


class InvalidInputError(PoseSmoothError, ValueError):
    exit_code = 4


class UnusableSegmentError(InvalidInputError):
    """A segment has no valid measurement to substitute from."""


class DataFormatError(InvalidInputError):
    """Malformed trajectory record or checkpoint content."""


class CheckpointVersionError(DataFormatError):
    pass


class NumericalError(PoseSmoothError, ArithmeticError):
    exit_code = 5


class InternalConsistencyError(PoseSmoothError, RuntimeError):
    exit_code = 1
