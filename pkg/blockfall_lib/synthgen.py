"""
Synthetic before/after scene pairs with exact ground truth.

Scenes are a pure function of their :py:class:`SceneSpec`: every random draw
comes from one generator seeded by ``spec.seed``.
"""

__all__ = [
    "Background",
    "SceneSpec",
    "SyntheticScene",
    "generate_scene",
]

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage as ndi

from .constants import MIN_ANNOTATION_HEIGHT, MIN_ANNOTATION_WIDTH, PIXEL_SCALE
from .evaluation import GroundTruthBlock
from .hog import NEGATIVE, POSITIVE, AnnotationBox
from .raster import Raster, SunGeometry, Translation, shift
from .types import Point
from .utils import angular_distance, azimuth_of

logger = logging.getLogger(__name__)

FOUR_CONNECTED = ndi.generate_binary_structure(2, 1)
SHADOW_ANGLE_TOLERANCE = 10.0  # degrees


class Background:
    FLAT = "flat"
    TEXTURED = "textured"
    LAYERED = "layered"
    CHANGING = "changing"

    ALL = (FLAT, TEXTURED, LAYERED, CHANGING)


def _default_sun() -> SunGeometry:
    return SunGeometry(azimuth_deg=135.0, incidence_deg=60.0)


@dataclass(frozen=True)
class SceneSpec:
    """
    Recipe of a synthetic scene.

    :param block_area_range: Nominal block areas in pixels.
    :param block_contrast_range: Brightness added at block centres.
    :param shadow_contrast_range: Darkening at shadow centres.
    :param shadow_fraction: Share of blocks that cast a shadow.
    :param global_shift: Misregistration (dx, dy) applied to 'before'.
    """

    width: int = 400
    height: int = 400
    seed: int = 0
    n_blocks: int = 30
    block_area_range: Tuple[float, float] = (8.0, 80.0)
    block_contrast_range: Tuple[float, float] = (40.0, 90.0)
    shadow_contrast_range: Tuple[float, float] = (40.0, 70.0)
    background: str = Background.TEXTURED
    noise_sigma: float = 2.0
    sun: SunGeometry = field(default_factory=_default_sun)
    shadow_fraction: float = 0.8
    global_shift: Tuple[float, float] = (0.0, 0.0)
    pixel_scale: float = PIXEL_SCALE
    base_intensity: float = 110.0
    max_tries: int = 100

    def __post_init__(self) -> None:
        if self.width < 16 or self.height < 16:
            raise ValueError(
                f"Scene must be at least 16x16 px, got {self.width}x{self.height}"
            )
        if self.n_blocks < 0:
            raise ValueError(f"n_blocks must be >= 0, got {self.n_blocks}")
        ranges = {
            "block_area_range": self.block_area_range,
            "block_contrast_range": self.block_contrast_range,
            "shadow_contrast_range": self.shadow_contrast_range,
        }
        for name, (low, high) in ranges.items():
            if not 0 < low <= high:
                raise ValueError(
                    f"{name} must be a non-empty positive range.\n"
                    f"| Got: ({low}, {high})"
                )
        if not 0.0 <= self.shadow_fraction <= 1.0:
            raise ValueError(
                f"shadow_fraction must be in [0, 1], got {self.shadow_fraction}"
            )
        if self.background not in Background.ALL:
            raise ValueError(
                "Unknown background mode.\n"
                f"| Expected: one of {', '.join(Background.ALL)}\n"
                f"| Got: {self.background}"
            )
        if self.noise_sigma < 0 or self.pixel_scale <= 0 or self.max_tries < 1:
            raise ValueError("noise_sigma, pixel_scale or max_tries out of range.")


@dataclass(eq=False)
class SyntheticScene:
    """
    Generated pair and its truth.

    ``labels`` marks block pixels with their truth id; ``shadow_labels``
    marks the shadow pixels of the same block.
    """

    spec: SceneSpec
    before: Raster
    after: Raster
    truth: List[GroundTruthBlock]
    labels: np.ndarray
    shadow_labels: np.ndarray
    shadows: Dict[int, Point] = field(default_factory=dict)
    """Shadow centroid of every truth block that has one."""

    @property
    def requested(self) -> int:
        return self.spec.n_blocks

    @property
    def placed(self) -> int:
        return len(self.truth)

    def training_annotations(self, negative_size: Tuple[int, int] = (24, 30)):
        """
        Positive boxes around every block and its shadow, plus negative boxes
        on a regular grid wherever no block or shadow is near.
        """
        height, width = self.labels.shape
        annotations = []
        footprint = (self.labels > 0) | (self.shadow_labels > 0)
        for block in self.truth:
            rows, cols = np.nonzero(
                (self.labels == block.id) | (self.shadow_labels == block.id)
            )
            x0, x1 = int(cols.min()) - 1, int(cols.max()) + 2
            y0, y1 = int(rows.min()) - 1, int(rows.max()) + 2
            box_width = max(x1 - x0, MIN_ANNOTATION_WIDTH)
            box_height = max(y1 - y0, MIN_ANNOTATION_HEIGHT)
            x = min(max((x0 + x1 - box_width) // 2, 0), width - box_width)
            y = min(max((y0 + y1 - box_height) // 2, 0), height - box_height)
            annotations.append(AnnotationBox(x, y, box_width, box_height, POSITIVE))

        neg_width, neg_height = negative_size
        blocked = ndi.binary_dilation(footprint, iterations=3)
        for y in range(0, height - neg_height + 1, neg_height + 2):
            for x in range(0, width - neg_width + 1, neg_width + 2):
                if not blocked[y : y + neg_height, x : x + neg_width].any():
                    annotations.append(
                        AnnotationBox(x, y, neg_width, neg_height, NEGATIVE)
                    )
        return annotations


def _unit_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    field_ = ndi.gaussian_filter(rng.normal(size=shape), sigma, mode="reflect")
    spread = field_.std()
    return field_ / spread if spread > 0 else field_


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    shape = (spec.height, spec.width)
    base = np.full(shape, spec.base_intensity)
    if spec.background == Background.FLAT:
        return base
    if spec.background == Background.LAYERED:
        strata = ndi.gaussian_filter1d(rng.normal(size=spec.height), 4.0)
        strata = strata / strata.std() if strata.std() > 0 else strata
        texture = _unit_noise(rng, shape, 1.5)
        return base + 18.0 * strata[:, None] + 4.0 * texture
    return base + 10.0 * _unit_noise(rng, shape, 2.0)


def _changing_patches(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    patches = np.zeros((spec.height, spec.width))
    for _ in range(max(1, spec.width * spec.height // 40000)):
        cx, cy = rng.uniform(0, spec.width), rng.uniform(0, spec.height)
        sigma = rng.uniform(8.0, 20.0)
        amplitude = rng.uniform(15.0, 30.0) * rng.choice([-1.0, 1.0])
        patches += amplitude * np.exp(
            -((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma**2)
        )
    return patches


def _ellipse_weight(
    xx: np.ndarray,
    yy: np.ndarray,
    centre: Tuple[float, float],
    semi_axes: Tuple[float, float],
    theta: float,
) -> np.ndarray:
    """Coverage of an ellipse with a soft rim; >= 0.5 exactly inside it."""
    cx, cy = centre
    a, b = semi_axes
    u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
    v = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    return np.clip(0.5 + (1.0 - r) * min(a, b), 0.0, 1.0)


@dataclass
class _Placement:
    window: Tuple[slice, slice]
    block_weight: np.ndarray
    shadow_weight: np.ndarray
    block_mask: np.ndarray
    shadow_mask: np.ndarray


def _shadow_is_cast(
    block_mask: np.ndarray, shadow_mask: np.ndarray, sun: SunGeometry
) -> bool:
    """Rendered shadow is large enough and lies along the anti-sun azimuth."""
    if shadow_mask.sum() < max(4, 0.25 * block_mask.sum()):
        return False
    block_rows, block_cols = np.nonzero(block_mask)
    rows, cols = np.nonzero(shadow_mask)
    angle = azimuth_of(cols.mean() - block_cols.mean(), rows.mean() - block_rows.mean())
    return angular_distance(angle, sun.anti_sun_azimuth) <= SHADOW_ANGLE_TOLERANCE


def _try_place(
    spec: SceneSpec,
    rng: np.random.Generator,
    has_shadow: bool,
    occupied: np.ndarray,
) -> Optional[_Placement]:
    area = rng.uniform(*spec.block_area_range)
    aspect = rng.uniform(0.6, 1.0)
    theta = rng.uniform(0.0, math.pi)
    a = math.sqrt(area / (math.pi * aspect))
    b = a * aspect
    cx = rng.uniform(0.0, spec.width)
    cy = rng.uniform(0.0, spec.height)

    dx, dy = spec.sun.shadow_direction
    phi = math.atan2(dy, dx) - theta
    along = math.hypot(a * math.cos(phi), b * math.sin(phi))
    across = math.hypot(a * math.sin(phi), b * math.cos(phi))
    equivalent_diameter = 2.0 * math.sqrt(area / math.pi)
    length = 0.5 * equivalent_diameter * math.tan(math.radians(spec.sun.incidence_deg))
    shadow_axes = (max(length / 2.0, 1.0), max(0.9 * across, 1.5))
    offset = along + shadow_axes[0]
    shadow_centre = (cx + dx * offset, cy + dy * offset)

    reach = a + 2.0
    x0, x1 = cx - reach, cx + reach
    y0, y1 = cy - reach, cy + reach
    if has_shadow:
        shadow_reach = max(shadow_axes) + 2.0
        x0 = min(x0, shadow_centre[0] - shadow_reach)
        x1 = max(x1, shadow_centre[0] + shadow_reach)
        y0 = min(y0, shadow_centre[1] - shadow_reach)
        y1 = max(y1, shadow_centre[1] + shadow_reach)
    left, top = int(math.floor(x0)), int(math.floor(y0))
    right, bottom = int(math.ceil(x1)) + 1, int(math.ceil(y1)) + 1
    if left < 2 or top < 2 or right > spec.width - 2 or bottom > spec.height - 2:
        return None

    window = (slice(top, bottom), slice(left, right))
    yy, xx = np.mgrid[top:bottom, left:right].astype(np.float64)
    block_weight = _ellipse_weight(xx, yy, (cx, cy), (a, b), theta)
    block_mask = block_weight >= 0.5
    if has_shadow:
        shadow_weight = _ellipse_weight(
            xx, yy, shadow_centre, shadow_axes, math.atan2(dy, dx)
        ) * np.clip(1.0 - 2.0 * block_weight, 0.0, 1.0)
        shadow_mask = (shadow_weight >= 0.5) & (block_weight == 0)
    else:
        shadow_weight = np.zeros_like(block_weight)
        shadow_mask = np.zeros_like(block_mask)

    if block_mask.sum() < 4 or ndi.label(block_mask, FOUR_CONNECTED)[1] != 1:
        return None
    if has_shadow and not _shadow_is_cast(block_mask, shadow_mask, spec.sun):
        return None
    footprint = (block_weight > 0) | (shadow_weight > 0)
    if np.any(occupied[window] & ndi.binary_dilation(footprint, iterations=2)):
        return None
    return _Placement(window, block_weight, shadow_weight, block_mask, shadow_mask)


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """
    Render a scene.

    Blocks are bright soft-edged ellipses; a shadow is a dark ellipse abutting
    its block along the anti-sun azimuth, as long as half the block's
    equivalent diameter times the tangent of the incidence angle. 'before'
    holds the background alone, shifted by ``global_shift`` and, for the
    changing background, with extra patches. Blocks that find no free spot
    within ``max_tries`` draws are skipped.
    """
    rng = np.random.default_rng(spec.seed)
    shape = (spec.height, spec.width)
    background = np.clip(_background(spec, rng), 40.0, 160.0)
    before_background = background.copy()
    if spec.background == Background.CHANGING:
        before_background = np.clip(
            before_background + _changing_patches(spec, rng), 0.0, 255.0
        )

    planted = np.zeros(shape)
    occupied = np.zeros(shape, dtype=bool)
    labels = np.zeros(shape, dtype=np.int32)
    shadow_labels = np.zeros(shape, dtype=np.int32)
    truth: List[GroundTruthBlock] = []
    shadows: Dict[int, Point] = {}
    for _ in range(spec.n_blocks):
        has_shadow = bool(rng.random() < spec.shadow_fraction)
        contrast = rng.uniform(*spec.block_contrast_range)
        depth = rng.uniform(*spec.shadow_contrast_range)
        placement = None
        for _ in range(spec.max_tries):
            placement = _try_place(spec, rng, has_shadow, occupied)
            if placement is not None:
                break
        if placement is None:
            continue

        block_id = len(truth) + 1
        window = placement.window
        planted[window] += (
            contrast * placement.block_weight - depth * placement.shadow_weight
        )
        occupied[window] |= (placement.block_weight > 0) | (
            placement.shadow_weight > 0
        )
        labels[window][placement.block_mask] = block_id
        shadow_labels[window][placement.shadow_mask] = block_id

        rows, cols = np.nonzero(labels == block_id)
        truth.append(
            GroundTruthBlock(
                id=block_id,
                bbox=(
                    int(cols.min()),
                    int(rows.min()),
                    int(cols.max() - cols.min() + 1),
                    int(rows.max() - rows.min() + 1),
                ),
                area_px=int(rows.size),
                centroid=(float(cols.mean()), float(rows.mean())),
            )
        )
        if has_shadow:
            rows, cols = np.nonzero(shadow_labels == block_id)
            shadows[block_id] = (float(cols.mean()), float(rows.mean()))

    if len(truth) < spec.n_blocks:
        logger.warning(
            "Placed %d of %d requested blocks", len(truth), spec.n_blocks
        )

    after_values = background + planted
    before = Raster.clamped(before_background, spec.pixel_scale)
    dx, dy = spec.global_shift
    if dx or dy:
        before = shift(before, Translation(dx, dy))
    before_values = before.values
    if spec.noise_sigma > 0:
        after_values = after_values + rng.normal(0.0, spec.noise_sigma, shape)
        before_values = before_values + rng.normal(0.0, spec.noise_sigma, shape)

    return SyntheticScene(
        spec=spec,
        before=Raster.clamped(np.rint(before_values), spec.pixel_scale),
        after=Raster.clamped(np.rint(after_values), spec.pixel_scale),
        truth=truth,
        labels=labels,
        shadow_labels=shadow_labels,
        shadows=shadows,
    )
