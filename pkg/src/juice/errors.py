"""Exception types raised across the package."""


class JuiceError(Exception):
    """Base class for all package errors."""


class NonDivisible(JuiceError, ValueError):
    pass


class BadCount(JuiceError, ValueError):
    pass


class NonPositiveVariance(JuiceError, ValueError):
    pass


class SingularInput(JuiceError, ValueError):
    pass


class DegenerateCavity(JuiceError, ArithmeticError):
    """A cavity variance became non-positive after site subtraction."""


class TooLarge(JuiceError, ValueError):
    pass


class ZeroTruth(JuiceError, ValueError):
    pass


class ConfigError(JuiceError, ValueError):
    pass
