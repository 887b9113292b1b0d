"""Exception hierarchy shared by all stdreg modules.

``DataError`` covers malformed or unusable inputs (CLI exit code 3),
``NumericalError`` covers runtime numerical failures (exit code 4).
"""


class StdregError(Exception):
    """Base class for all stdreg errors."""


class DataError(StdregError):
    """Input data is malformed, inconsistent, or unusable."""


class NumericalError(StdregError):
    """A numerical procedure failed (non-finite cost, singular system)."""


class SceneFormatError(DataError):
    """Scene header/raw file is missing, malformed, or inconsistent."""


class EmptyForegroundError(DataError):
    """Operation requires at least one voxel with positive intensity."""


class DegenerateLandmarksError(DataError):
    """Histogram landmarks collapse (flat histogram or median at an end)."""


class ProtocolMismatchError(DataError):
    """Scene protocol/body-region tag does not match the trained model."""


class DegenerateFitError(DataError):
    """Polynomial fit is rank deficient or produces a non-positive field."""
