"""Exception and warning types raised across the package."""


class ThinLayerError(Exception):
    """Base class for all errors raised by :mod:`thinlayer`."""


# geometry
class DegenerateObstacle(ThinLayerError):
    pass


class ObstacleTouchesBoundary(ThinLayerError):
    pass


class NonIntegerPeriodCount(ThinLayerError):
    pass


class LayerTooWide(ThinLayerError):
    pass


class FeatureUnderresolved(ThinLayerError):
    pass


class GeometryMeshMismatch(ThinLayerError):
    pass


# problem data
class AmbiguousClassification(ThinLayerError):
    pass


class AssumptionViolation(ThinLayerError):
    pass


class ConfigError(ThinLayerError):
    pass


# finite elements
class NonPositiveDiffusion(ThinLayerError):
    pass


class UnknownTag(ThinLayerError):
    pass


class LinearSolveFailure(ThinLayerError):
    pass


class PicardDivergence(ThinLayerError):
    pass


# macro models
class InterfaceIterationDiverged(ThinLayerError):
    pass


# studies
class RegionMismatch(ThinLayerError):
    pass


class SweepTooShort(ThinLayerError):
    pass


class NonPositiveInput(ThinLayerError):
    pass


class DegenerateCellOperator(UserWarning):
    """Both cell-line switches are off, so the layer reduces to pointwise ODEs."""


class AssumptionWarning(UserWarning):
    """An admissibility condition fails but the run was allowed to proceed."""
