"""Exception types raised across the package."""


class KernelFlowError(Exception):
    """Base class for all package errors."""


class FactorizationFailure(KernelFlowError):
    """A Gram matrix could not be factorized as symmetric positive definite."""


class DegenerateLabels(KernelFlowError):
    """The RKHS norm of the full interpolant vanishes, so rho is undefined."""


class RhoOutOfRange(KernelFlowError):
    """rho left [0, 1] by more than the clamping tolerance."""


class DimensionMismatch(KernelFlowError, ValueError):
    pass


class InsufficientPoints(KernelFlowError, ValueError):
    pass


class BadMagic(KernelFlowError, ValueError):
    pass


class TruncatedFile(KernelFlowError, ValueError):
    pass


class DimensionOverflow(KernelFlowError, ValueError):
    pass


class ZeroVector(KernelFlowError, ValueError):
    pass


class ConfigError(KernelFlowError, ValueError):
    pass
