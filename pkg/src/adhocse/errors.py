"""Exception types raised across the package."""


class AdhocSEError(Exception):
    """Base class for all package errors."""


class LengthError(AdhocSEError, ValueError):
    pass


class ShapeError(AdhocSEError, ValueError):
    pass


class GeometryError(AdhocSEError, ValueError):
    pass


class GenerationError(AdhocSEError, RuntimeError):
    pass


class NumericError(AdhocSEError, FloatingPointError):
    pass


class DegenerateMaskError(AdhocSEError, ValueError):
    """Noise weights sum to zero at some frequency bins."""

    def __init__(self, bins):
        self.bins = list(bins)
        super().__init__(f"noise weights sum to zero at frequency bins {self.bins[:10]}"
                         + (" ..." if len(self.bins) > 10 else ""))


class ProtocolError(AdhocSEError, ValueError):
    pass


class TrainingError(AdhocSEError, RuntimeError):
    def __init__(self, msg, epoch=None):
        self.epoch = epoch
        super().__init__(msg if epoch is None else f"{msg} (epoch {epoch})")


class SampleRateError(AdhocSEError, ValueError):
    pass


class ConfigError(AdhocSEError, ValueError):
    pass


class MissingArtifactError(AdhocSEError, FileNotFoundError):
    """A dataset, model or other prerequisite file is absent."""
