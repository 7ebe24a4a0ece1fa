"""Exception hierarchy shared by every mfgkit module."""


class MfgError(Exception):
    """Base class for all mfgkit errors."""


# measures
class EmptyInput(MfgError, ValueError):
    pass


class DimensionMismatch(MfgError, ValueError):
    pass


class NonFiniteCoordinate(MfgError, ValueError):
    pass


class SizeMismatch(MfgError, ValueError):
    pass


class TooLargeForExactAssignment(MfgError, ValueError):
    pass


class UnsupportedOrder(MfgError, ValueError):
    pass


# model
class NoConvergence(MfgError, RuntimeError):
    pass


class UnknownModel(MfgError, KeyError):
    pass


class ParamOutOfRange(MfgError, ValueError):
    pass


# monotone
class SingularHessian(MfgError, ArithmeticError):
    pass


# hjb / flow
class DomainTooSmall(MfgError, RuntimeError):
    def __init__(self, message: str, count: int = 0):
        super().__init__(message)
        self.count = count


class NonConvergentLineSearch(MfgError, RuntimeError):
    pass


class BlowUp(MfgError, RuntimeError):
    pass


# mfg / hamsys
class MaxIterExceeded(MfgError, RuntimeError):
    pass


class ShootingDiverged(MfgError, RuntimeError):
    pass


# cli
class ConfigInvalid(MfgError, ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
