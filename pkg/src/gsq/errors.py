"""Exception types shared across the package."""


class GsqError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(GsqError):
    """A scalar or vector parameter is non-finite or out of its domain."""


class DegenerateCovarianceError(GsqError):
    """Scales too small to form a positive-definite covariance (clamping disabled)."""


class InvalidSceneError(GsqError):
    """A Gaussian set contains non-finite parameters."""


class ShapeError(GsqError):
    """Array dimensions do not match the operation's contract."""


class EmptyStatisticsError(GsqError):
    """Usage statistics requested before any quantization query was recorded."""


class DivergenceError(GsqError):
    """The fitting loss became non-finite."""

    def __init__(self, step: int, components: dict):
        self.step = step
        self.components = dict(components)
        detail = ", ".join(f"{k}={v!r}" for k, v in self.components.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")


class FileFormatError(GsqError):
    """A .gsq/.gcb file is truncated, mislabeled, or internally inconsistent."""
