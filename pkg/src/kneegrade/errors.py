"""Exception taxonomy shared across the package.

Every error raised on purpose derives from KneeGradeError so the CLI can
distinguish expected failures (reported on one line, nonzero exit) from bugs.
"""


class KneeGradeError(Exception):
    """Base class for all deliberate failures."""


class ConfigurationError(KneeGradeError):
    """Invalid configuration value, shape mismatch, or schema violation."""


class DataError(KneeGradeError):
    """Malformed or out-of-range input data (manifests, labels, targets)."""


class GeometryError(KneeGradeError):
    """Landmark or crop geometry that cannot be satisfied."""


class NormalizationError(KneeGradeError):
    """Intensity normalization impossible (constant image, degenerate variance)."""


class NumericsError(KneeGradeError):
    """Non-finite values appeared where finite math was expected."""


class TrainingError(KneeGradeError):
    """Optimization failure, e.g. a non-finite gradient."""


class WeightLoadError(KneeGradeError):
    """Weight container unreadable or incompatible with the target model."""


class UsageError(KneeGradeError):
    """API misuse: wrong call order, wrong argument kind."""


class MetricUndefinedError(KneeGradeError):
    """A statistic has no defined value on the given sample."""


class BootstrapError(KneeGradeError):
    """Bootstrap failed on too many iterations to report an interval."""
