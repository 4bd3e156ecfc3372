"""Exception types shared across the package."""


class RMFError(Exception):
    """Base class for all package errors."""


class InvalidArgument(RMFError, ValueError):
    pass


class CutLocus(RMFError, ValueError):
    """Log map requested at (or numerically too close to) the cut locus."""


class ScheduleSingularity(RMFError, ValueError):
    pass


class NonFinite(RMFError, ArithmeticError):
    pass


class FormatError(RMFError):
    pass


class ConfigMismatch(RMFError):
    pass


class UnconditionalNet(RMFError):
    pass


class InvalidSpec(RMFError, ValueError):
    pass


class ParseError(RMFError):
    def __init__(self, line: int, message: str = ""):
        self.line = line
        super().__init__(f"line {line}: {message}" if message else f"line {line}")


class InvariantViolation(RMFError):
    def __init__(self, line: int, message: str = ""):
        self.line = line
        super().__init__(f"line {line}: {message}" if message else f"line {line}")
