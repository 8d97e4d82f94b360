"""Exception hierarchy.

Every error raised on purpose by the package derives from ``ViewReidError``
so callers (and the CLI) can separate bad input from programming errors.
"""


class ViewReidError(Exception):
    pass


class ZeroVector(ViewReidError, ValueError):
    pass


class DimensionMismatch(ViewReidError, ValueError):
    pass


class NotNormalized(ViewReidError, ValueError):
    pass


class ShapeMismatch(ViewReidError, ValueError):
    pass


# losses


class NoPositives(ViewReidError, ValueError):
    def __init__(self, anchor, message=None):
        self.anchor = anchor
        super().__init__(message or f"anchor {anchor} has no positive")


class BatchTooSmall(ViewReidError, ValueError):
    pass


class DictionaryIncomplete(ViewReidError, ValueError):
    pass


class UnknownClass(ViewReidError, ValueError):
    pass


class UnknownImageId(ViewReidError, KeyError):
    pass


class InvalidEpsilon(ViewReidError, ValueError):
    pass


class LabelOutOfRange(ViewReidError, ValueError):
    pass


# view-aware post-processing


class EmptySet(ViewReidError, ValueError):
    pass


class MissingDiagonalCenter(ViewReidError, ValueError):
    def __init__(self, view):
        self.view = view
        super().__init__(f"view {view} has no same-view positive pair; c({view},{view}) undefined")


class DegenerateCenter(ViewReidError, ValueError):
    pass


class NegativeDistance(ViewReidError, ValueError):
    pass


class ViewOutOfRange(ViewReidError, ValueError):
    pass


class WrongDistanceKind(ViewReidError, ValueError):
    pass


# evaluation


class NoValidQueries(ViewReidError, ValueError):
    pass


class RankOutOfRange(ViewReidError, ValueError):
    pass


# synthetic data / training


class InfeasibleConfig(ViewReidError, ValueError):
    pass


class DivergenceDetected(ViewReidError, RuntimeError):
    pass


# file formats


class FormatError(ViewReidError, ValueError):
    """Malformed dump, manifest or matrix file."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(message if field is None else f"{field}: {message}")
