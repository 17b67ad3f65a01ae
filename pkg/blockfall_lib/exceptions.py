__all__ = [
    "DimensionMismatchError",
    "NoTextureError",
    "DivergedError",
    "EmptyClassError",
    "ManifestError",
    "ModelFormatError",
]


class DimensionMismatchError(ValueError):
    """Two rasters that must share a grid have different shapes."""


class NoTextureError(ValueError):
    """A raster carries no intensity variation to align or describe."""


class DivergedError(RuntimeError):
    """Iterative alignment left the allowed search window."""


class EmptyClassError(ValueError):
    """Training samples are missing for one of the classes."""


class ManifestError(ValueError):
    """Manifest references missing files or holds invalid values."""


class ModelFormatError(ValueError):
    """Binary model or sample file has an unexpected layout."""
