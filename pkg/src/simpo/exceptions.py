"""Exception hierarchy shared across the package."""


class SimpoError(Exception):
    """Base class for all package errors."""


class ShapeError(SimpoError, ValueError):
    pass


class DomainError(SimpoError, ValueError):
    pass


class NonFiniteError(SimpoError, FloatingPointError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class BracketError(SimpoError, ValueError):
    def __init__(self, message, low_mean=None, high_mean=None):
        super().__init__(message)
        self.low_mean = low_mean
        self.high_mean = high_mean


class InfeasibleError(SimpoError, ValueError):
    pass


class SingularityError(SimpoError, ZeroDivisionError):
    """Weighted posterior mass vanishes, so the closed-form velocity is undefined."""

    def __init__(self, message, denominator=None):
        super().__init__(message)
        self.denominator = denominator


class UnsupportedError(SimpoError, NotImplementedError):
    pass


class ConfigError(SimpoError, ValueError):
    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line
