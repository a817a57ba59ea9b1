"""Exceptions raised across the package.

Every error is a ``ValueError`` so callers that only care about bad input can
catch that; the named subclasses let the command line map failures to
field-level messages.
"""


class HomogenizationError(ValueError):
    pass


# spectral
class SpectralError(HomogenizationError):
    pass


class InvalidRateMatrix(SpectralError):
    pass


class RowSumViolation(SpectralError):
    pass


class NotIrreducible(SpectralError):
    pass


class NotDiagonalizable(SpectralError):
    pass


class ComplexResidue(SpectralError):
    pass


# state
class DegenerateReference(HomogenizationError):
    pass


class CertificationFailed(HomogenizationError):
    pass


class InvalidParams(HomogenizationError):
    pass


# simulator
class PreconditionViolated(HomogenizationError):
    pass


class RateOverflow(HomogenizationError):
    pass


class EventBudgetExceeded(HomogenizationError):
    pass


# martingale
class NotInHyperplane(HomogenizationError):
    pass


class DomainViolation(HomogenizationError):
    pass


class AdmissibilityViolation(HomogenizationError):
    pass


class BoundaryPoint(HomogenizationError):
    pass


class QuadratureDivergence(HomogenizationError):
    pass


# scaling / cli
class RegimeMismatch(HomogenizationError):
    pass


class ConfigInvalid(HomogenizationError):
    def __init__(self, field, message):
        self.field = field
        super().__init__("{}: {}".format(field, message))


class SpectralRejection(HomogenizationError):
    """Config-level wrapper around a SpectralError raised while validating Q."""

    def __init__(self, cause):
        self.cause = cause
        super().__init__("Q rejected ({}): {}".format(type(cause).__name__, cause))
