"""Raster carrier and the pixel transforms shared by every stage."""

__all__ = [
    "Raster",
    "SunGeometry",
    "Translation",
    "NormalizedTile",
    "difference_image",
    "bilateral_filter",
    "normalize_to_reference",
    "upscale",
    "resize",
    "shift",
]

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage as ndi

from .constants import (
    BILATERAL_DIAMETER,
    BILATERAL_SIGMA_INTENSITY,
    BILATERAL_SIGMA_SPACE,
    DIFFERENCE_OFFSET,
    INTENSITY_MAX,
    NORMALIZE_PERCENTILES,
    PIXEL_SCALE,
)
from .exceptions import DimensionMismatchError
from .types import Degrees, MetersPerPixel, Pixels, SubPixels


@dataclass(eq=False)
class Raster:
    """
    Grayscale intensity grid with its ground sampling distance.

    Values are stored as ``float64`` on the 0-255 scale so that filters can
    keep sub-integer precision; :py:meth:`to_uint8` gives the 8-bit form.

    :param values: 2-D array, rows are image lines.
    :param pixel_scale: Ground size of one pixel in meters.
    """

    values: np.ndarray
    pixel_scale: MetersPerPixel = PIXEL_SCALE

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.size == 0:
            raise ValueError(
                "Raster values must be a non-empty 2-D grid.\n"
                f"| Got shape: {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("Raster values must be finite.")
        if values.min() < 0 or values.max() > INTENSITY_MAX:
            raise ValueError(
                "Raster values must lie on the 0-255 scale.\n"
                f"| Got range: [{values.min()}, {values.max()}]"
            )
        if not self.pixel_scale > 0:
            raise ValueError(
                "pixel_scale must be positive.\n" f"| Got: {self.pixel_scale}"
            )
        self.values = values

    @classmethod
    def clamped(cls, values: np.ndarray, pixel_scale: MetersPerPixel) -> "Raster":
        """Build a raster from values that may over- or undershoot 0-255."""
        return cls(np.clip(values, 0.0, float(INTENSITY_MAX)), pixel_scale)

    @property
    def width(self) -> Pixels:
        return int(self.values.shape[1])

    @property
    def height(self) -> Pixels:
        return int(self.values.shape[0])

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    def __repr__(self) -> str:
        return f"<Raster {self.width}x{self.height} @ {self.pixel_scale} m/px>"

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.values), 0, INTENSITY_MAX).astype(np.uint8)

    def crop(self, x: Pixels, y: Pixels, width: Pixels, height: Pixels) -> "Raster":
        if x < 0 or y < 0 or x + width > self.width or y + height > self.height:
            raise ValueError(
                "Crop window leaves the raster.\n"
                f"| Raster: {self.width}x{self.height}\n"
                f"| Got: x={x} y={y} w={width} h={height}"
            )
        return Raster(self.values[y : y + height, x : x + width], self.pixel_scale)


@dataclass(frozen=True)
class SunGeometry:
    """
    Illumination of a scene.

    :param azimuth_deg: Direction toward the sun, degrees clockwise from
        image-up. Normalised to [0, 360).
    :param incidence_deg: Sun to surface-normal angle, in (0, 90).
    """

    azimuth_deg: Degrees
    incidence_deg: Degrees

    def __post_init__(self) -> None:
        if not math.isfinite(self.azimuth_deg):
            raise ValueError(f"azimuth_deg must be finite, got {self.azimuth_deg}")
        object.__setattr__(self, "azimuth_deg", float(self.azimuth_deg) % 360.0)
        if not 0.0 < self.incidence_deg < 90.0:
            raise ValueError(
                "incidence_deg must be in (0, 90).\n"
                f"| Got: {self.incidence_deg}"
            )

    @property
    def anti_sun_azimuth(self) -> Degrees:
        """Direction in which shadows are cast."""
        return (self.azimuth_deg + 180.0) % 360.0

    @property
    def shadow_direction(self) -> Tuple[float, float]:
        """Unit image vector (dx, dy) pointing along the cast shadows."""
        rad = math.radians(self.anti_sun_azimuth)
        return (math.sin(rad), -math.cos(rad))


@dataclass(frozen=True)
class Translation:
    """
    Displacement of one raster relative to another.

    A raster ``moving`` displaced by ``(dx, dy)`` from ``template`` satisfies
    ``moving(x + dx, y + dy) == template(x, y)``.
    """

    dx: SubPixels = 0.0
    dy: SubPixels = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.dx) and math.isfinite(self.dy)):
            raise ValueError(f"Translation must be finite, got ({self.dx}, {self.dy})")

    @property
    def magnitude(self) -> SubPixels:
        return math.hypot(self.dx, self.dy)

    def __neg__(self) -> "Translation":
        return Translation(-self.dx, -self.dy)


@dataclass(frozen=True)
class NormalizedTile:
    raster: Raster
    degenerate: bool = False
    """Set when the tile had no intensity spread and was only shifted."""


def _check_same_shape(first: Raster, second: Raster) -> None:
    if first.shape != second.shape:
        raise DimensionMismatchError(
            "Rasters must share dimensions.\n"
            f"| Expected: {first.width}x{first.height}\n"
            f"| Got: {second.width}x{second.height}"
        )


def difference_image(before: Raster, after: Raster) -> Raster:
    """
    Offset-encoded change image ``clamp(after - before + 128)``.

    Static ground maps near 128, new bright objects above and new shadows
    below it.
    """
    _check_same_shape(before, after)
    values = np.rint(after.values - before.values + DIFFERENCE_OFFSET)
    return Raster.clamped(values, after.pixel_scale)


def bilateral_filter(
    img: Raster,
    diameter: Pixels = BILATERAL_DIAMETER,
    sigma_intensity: float = BILATERAL_SIGMA_INTENSITY,
    sigma_space: float = BILATERAL_SIGMA_SPACE,
) -> Raster:
    """
    Edge preserving smoothing over a circular neighbourhood.

    Every output pixel is a convex combination of its neighbours, so the
    result never leaves the input's intensity range. Borders replicate the
    edge pixels.
    """
    if int(diameter) != diameter or diameter < 3 or diameter % 2 == 0:
        raise ValueError(
            "Bilateral diameter must be an odd integer >= 3.\n" f"| Got: {diameter}"
        )
    if not (sigma_intensity > 0 and sigma_space > 0):
        raise ValueError(
            "Bilateral sigmas must be positive.\n"
            f"| Got: sigma_intensity={sigma_intensity} sigma_space={sigma_space}"
        )
    radius = int(diameter) // 2
    values = img.values
    height, width = values.shape
    padded = np.pad(values, radius, mode="edge")
    numerator = np.zeros_like(values)
    denominator = np.zeros_like(values)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy > radius * radius:
                continue
            neighbour = padded[
                radius + dy : radius + dy + height, radius + dx : radius + dx + width
            ]
            weight = np.exp(
                -(dx * dx + dy * dy) / (2.0 * sigma_space**2)
                - (neighbour - values) ** 2 / (2.0 * sigma_intensity**2)
            )
            numerator += weight * neighbour
            denominator += weight
    return Raster.clamped(numerator / denominator, img.pixel_scale)


def normalize_to_reference(
    tile: Raster,
    reference: Raster,
    percentiles: Tuple[float, float] = NORMALIZE_PERCENTILES,
) -> NormalizedTile:
    """
    Map the tile's robust intensity range onto the reference's.

    The ``percentiles`` of the tile are linearly sent to the same percentiles
    of the reference. A tile without spread is shifted to the reference
    median instead and flagged degenerate.
    """
    _check_same_shape(reference, tile)
    low, high = percentiles
    tile_low, tile_high = np.percentile(tile.values, [low, high])
    ref_low, ref_high = np.percentile(reference.values, [low, high])
    if tile_high - tile_low <= 1e-9:
        offset = np.median(reference.values) - np.median(tile.values)
        return NormalizedTile(
            Raster.clamped(tile.values + offset, tile.pixel_scale), degenerate=True
        )
    gain = (ref_high - ref_low) / (tile_high - tile_low)
    values = (tile.values - tile_low) * gain + ref_low
    return NormalizedTile(Raster.clamped(values, tile.pixel_scale))


def upscale(img: Raster, factor: int) -> Raster:
    """Bilinear enlargement by an integer factor, pixel centres aligned."""
    if int(factor) != factor or factor < 1:
        raise ValueError(
            "Upscale factor must be an integer >= 1.\n" f"| Got: {factor}"
        )
    factor = int(factor)
    if factor == 1:
        return Raster(img.values, img.pixel_scale)
    values = ndi.zoom(img.values, factor, order=1, mode="nearest", grid_mode=True)
    return Raster.clamped(values, img.pixel_scale / factor)


def resize(img: Raster, width: Pixels, height: Pixels) -> Raster:
    """Bilinear resampling to an exact output size."""
    if width < 1 or height < 1:
        raise ValueError(f"Target size must be positive, got {width}x{height}")
    if (width, height) == (img.width, img.height):
        return Raster(img.values, img.pixel_scale)
    zoom = (height / img.height, width / img.width)
    values = ndi.zoom(img.values, zoom, order=1, mode="nearest", grid_mode=True)
    if values.shape != (height, width):
        # zoom rounds the output shape; pad or trim the last line/column.
        pad_rows = max(0, height - values.shape[0])
        pad_cols = max(0, width - values.shape[1])
        values = np.pad(values, ((0, pad_rows), (0, pad_cols)), mode="edge")
        values = values[:height, :width]
    return Raster.clamped(values, img.pixel_scale * img.width / width)


def shift(img: Raster, translation: Translation) -> Raster:
    """
    Move the raster content by ``translation`` with bilinear resampling.

    ``shift(img, t)(x + t.dx, y + t.dy) == img(x, y)``; uncovered borders
    replicate the edge.
    """
    if translation.dx == 0 and translation.dy == 0:
        return Raster(img.values, img.pixel_scale)
    values = ndi.shift(
        img.values, (translation.dy, translation.dx), order=1, mode="nearest"
    )
    return Raster.clamped(values, img.pixel_scale)
