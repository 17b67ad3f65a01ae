"""
Blob chain: confirm candidate blocks in the difference image and extract
their shapes.

The flow is thresholding, MSER and simple blob detection of bright and dark
regions, Canny edges, block-shadow pairing, edge refinement of the block
shapes, marker watershed on the 'after' image and a final pairing check.
"""

__all__ = [
    "Polarity",
    "Detector",
    "ThresholdBands",
    "Region",
    "BlockCandidate",
    "MserParams",
    "SimpleBlobParams",
    "CannyParams",
    "PairingParams",
    "BlobConfig",
    "BlobResult",
    "compute_thresholds",
    "threshold_bands",
    "detect_mser",
    "detect_simple_blobs",
    "gradient_magnitude",
    "canny_edges",
    "merge_region_detections",
    "pair_blocks_shadows",
    "refine_with_edges",
    "watershed_refine",
    "finalize_candidates",
    "run_blob_chain",
]

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage as ndi
from skimage.filters import sobel
from skimage.segmentation import watershed

from .constants import (
    BAND_SIGMA_FRACTION,
    BLOB_CENTROID_MERGE,
    BLOB_MIN_REPEATABILITY,
    BLOB_THRESHOLD_STEP,
    CANNY_SIGMA,
    CANNY_STRONG,
    CANNY_WEAK,
    INTENSITY_MAX,
    MIN_REGION_AREA,
    MSER_DELTA,
    MSER_MAX_AREA_FRACTION,
    MSER_MAX_VARIATION,
    MSER_MIN_DIVERSITY,
    REGION_MERGE_OVERLAP,
    SHADOW_CONE_DEG,
    SHADOW_DISTANCE_FACTOR,
    SHADOW_MIN_AREA_RATIO,
    SHADOW_MIN_DISTANCE,
)
from .raster import Raster, SunGeometry
from .types import BoolMask, BoxTuple, Point
from .utils import angular_distance, azimuth_of, round_half_up

logger = logging.getLogger(__name__)

FOUR_CONNECTED = ndi.generate_binary_structure(2, 1)
EIGHT_CONNECTED = ndi.generate_binary_structure(2, 2)


class Polarity(str, enum.Enum):
    BRIGHT = "bright"
    DARK = "dark"


class Detector(enum.Flag):
    NONE = 0
    MSER = enum.auto()
    SIMPLE_BLOB = enum.auto()
    BOTH = MSER | SIMPLE_BLOB


@dataclass(frozen=True)
class ThresholdBands:
    """
    Dark and bright cut-offs of a difference image.

    ``dark_max`` and ``bright_min`` sit half a standard deviation below and
    above the mean; pixels strictly beyond them are dark or bright.
    """

    dark_max: int
    bright_min: int
    mean: float
    sigma: float
    degenerate: bool = False


@dataclass(eq=False)
class Region:
    """
    4-connected set of pixels found by one or more detectors.

    Pixels are kept as parallel ``rows``/``cols`` index arrays in raster
    coordinates, sorted row-major.
    """

    rows: np.ndarray
    cols: np.ndarray
    polarity: Polarity = Polarity.BRIGHT
    detectors: Detector = Detector.NONE

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=np.int64).ravel()
        cols = np.asarray(self.cols, dtype=np.int64).ravel()
        if rows.shape != cols.shape:
            raise ValueError("Region rows and cols must have the same length.")
        if rows.size < MIN_REGION_AREA:
            raise ValueError(
                f"Region area must be >= {MIN_REGION_AREA} px.\n| Got: {rows.size}"
            )
        order = np.lexsort((cols, rows))
        self.rows = rows[order]
        self.cols = cols[order]

    @classmethod
    def from_mask(
        cls,
        mask: BoolMask,
        polarity: Polarity = Polarity.BRIGHT,
        detectors: Detector = Detector.NONE,
    ) -> "Region":
        rows, cols = np.nonzero(mask)
        return cls(rows, cols, polarity, detectors)

    def __repr__(self) -> str:
        x, y = self.centroid
        return (
            f"<Region {self.polarity.value} {self.area_px} px at "
            f"({x:.1f}, {y:.1f}) {self.detectors}>"
        )

    @property
    def area_px(self) -> int:
        return int(self.rows.size)

    @property
    def centroid(self) -> Point:
        return (float(self.cols.mean()), float(self.rows.mean()))

    @property
    def bbox(self) -> BoxTuple:
        x0, y0 = int(self.cols.min()), int(self.rows.min())
        return (x0, y0, int(self.cols.max()) - x0 + 1, int(self.rows.max()) - y0 + 1)

    @property
    def equivalent_diameter(self) -> float:
        return 2.0 * math.sqrt(self.area_px / math.pi)

    @property
    def dual_detected(self) -> bool:
        return Detector.BOTH in self.detectors

    def to_mask(self, shape: Tuple[int, int]) -> BoolMask:
        mask = np.zeros(shape, dtype=bool)
        mask[self.rows, self.cols] = True
        return mask

    def flat_indices(self, width: int) -> np.ndarray:
        return self.rows * width + self.cols

    def is_four_connected(self) -> bool:
        x0, y0, width, height = self.bbox
        local = np.zeros((height, width), dtype=bool)
        local[self.rows - y0, self.cols - x0] = True
        return ndi.label(local, structure=FOUR_CONNECTED)[1] == 1

    def with_mask(self, mask: BoolMask) -> "Region":
        return Region.from_mask(mask, self.polarity, self.detectors)


@dataclass(eq=False)
class BlockCandidate:
    block: Region
    shadow: Optional[Region] = None
    pair_angle_deg: Optional[float] = None
    """Azimuth from block centroid to shadow centroid."""

    @property
    def has_shadow(self) -> bool:
        return self.shadow is not None


@dataclass(frozen=True)
class MserParams:
    delta: int = MSER_DELTA
    min_area: int = MIN_REGION_AREA
    max_area_fraction: float = MSER_MAX_AREA_FRACTION
    max_variation: float = MSER_MAX_VARIATION
    min_diversity: float = MSER_MIN_DIVERSITY


@dataclass(frozen=True)
class SimpleBlobParams:
    step: int = BLOB_THRESHOLD_STEP
    centroid_merge: float = BLOB_CENTROID_MERGE
    min_repeatability: int = BLOB_MIN_REPEATABILITY
    min_area: int = MIN_REGION_AREA


@dataclass(frozen=True)
class CannyParams:
    strong: float = CANNY_STRONG
    weak: float = CANNY_WEAK
    sigma: float = CANNY_SIGMA

    def __post_init__(self) -> None:
        if not self.strong >= self.weak > 0 or self.sigma <= 0:
            raise ValueError(
                "Canny needs strong >= weak > 0 and sigma > 0.\n"
                f"| Got: strong={self.strong} weak={self.weak} sigma={self.sigma}"
            )


@dataclass(frozen=True)
class PairingParams:
    """What counts as an adequate shadow for a block."""

    cone_deg: float = SHADOW_CONE_DEG
    distance_factor: float = SHADOW_DISTANCE_FACTOR
    min_distance: float = SHADOW_MIN_DISTANCE
    min_area_ratio: float = SHADOW_MIN_AREA_RATIO


@dataclass(frozen=True)
class BlobConfig:
    sigma_fraction: float = BAND_SIGMA_FRACTION
    min_area: int = MIN_REGION_AREA
    merge_overlap: float = REGION_MERGE_OVERLAP
    mser: MserParams = field(default_factory=MserParams)
    simple_blob: SimpleBlobParams = field(default_factory=SimpleBlobParams)
    canny: CannyParams = field(default_factory=CannyParams)
    pairing: PairingParams = field(default_factory=PairingParams)


def compute_thresholds(
    diff: Raster, sigma_fraction: float = BAND_SIGMA_FRACTION
) -> ThresholdBands:
    """
    Histogram statistics of the difference image and the derived bands.

    Bands are ``mean -/+ sigma_fraction * sigma`` rounded half up, and never
    cross the mean. A constant raster yields empty bands flagged degenerate.
    """
    mean = float(diff.values.mean())
    sigma = float(diff.values.std())
    dark_max = min(round_half_up(mean - sigma_fraction * sigma), math.floor(mean))
    bright_min = max(round_half_up(mean + sigma_fraction * sigma), math.ceil(mean))
    return ThresholdBands(dark_max, bright_min, mean, sigma, degenerate=sigma <= 0)


def threshold_bands(diff: Raster, bands: ThresholdBands) -> Tuple[BoolMask, BoolMask]:
    """Bright (``> bright_min``) and dark (``< dark_max``) masks."""
    return diff.values > bands.bright_min, diff.values < bands.dark_max


def _label(mask: BoolMask, structure: np.ndarray = FOUR_CONNECTED):
    return ndi.label(mask, structure=structure)


def _oriented_levels(diff: Raster, polarity: Polarity) -> np.ndarray:
    levels = np.rint(diff.values).astype(np.int64)
    return INTENSITY_MAX - levels if polarity == Polarity.DARK else levels


def detect_mser(
    diff: Raster, polarity: Polarity, params: Optional[MserParams] = None
) -> List[Region]:
    """
    Maximally stable extremal regions of one polarity.

    Extremal regions are the 4-connected components of ``{I >= t}`` for
    every gray level ``t`` (of the inverted raster for dark polarity). A
    region's variation is its relative growth down to level ``t - delta``;
    regions whose variation is a local minimum along their branch, within
    the area limits and at most ``max_variation`` are kept. Nested survivors
    closer in area than ``min_diversity`` keep only the stabler one.
    """
    params = params or MserParams()
    levels = _oriented_levels(diff, polarity)
    height, width = levels.shape
    low, high = int(levels.min()), int(levels.max())
    if low == high:
        return []
    max_area = max(params.min_area, int(params.max_area_fraction * levels.size))
    flat_index = np.arange(levels.size).reshape(levels.shape)

    labels = {}
    areas = {}
    reps = {}
    for t in range(low, high + 1):
        label_image, count = _label(levels >= t)
        labels[t] = label_image.ravel()
        areas[t] = np.bincount(labels[t], minlength=count + 1)
        reps[t] = np.asarray(
            ndi.minimum(flat_index, label_image, np.arange(1, count + 1)),
            dtype=np.int64,
        ).reshape(-1)

    def ancestor_area(t: int, rep: np.ndarray) -> np.ndarray:
        level = max(t, low)
        return areas[level][labels[level][rep]]

    variation = {}
    for t in range(low, high + 1):
        own = areas[t][1:].astype(np.float64)
        variation[t] = (ancestor_area(t - params.delta, reps[t]) - own) / own

    candidates = []
    for t in range(low, high + 1):
        own = areas[t][1:]
        var = variation[t]
        parent_var = (
            variation[t - 1][labels[t - 1][reps[t]] - 1]
            if t > low
            else np.full(var.shape, np.inf)
        )
        child_var = np.full(var.shape, np.inf)
        if t < high and reps[t + 1].size:
            parents = labels[t][reps[t + 1]] - 1
            order = np.lexsort((areas[t + 1][1:], parents))
            last = np.r_[parents[order][1:] != parents[order][:-1], True]
            child_var[parents[order][last]] = variation[t + 1][order][last]
        stable = (
            (var <= params.max_variation)
            & (own >= params.min_area)
            & (own <= max_area)
            & (var <= parent_var)
            & (var <= child_var)
        )
        for k in np.flatnonzero(stable):
            candidates.append((float(var[k]), -int(own[k]), int(reps[t][k]), t, k + 1))

    seen = set()
    accepted: List[Tuple[int, int, np.ndarray]] = []
    for _, neg_area, rep, t, label in sorted(candidates):
        key = (neg_area, rep)
        if key in seen:
            continue
        seen.add(key)
        mask = labels[t] == label
        area = -neg_area
        too_close = False
        for other_area, other_rep, other_mask in accepted:
            nested = mask[other_rep] or other_mask[rep]
            if nested and abs(area - other_area) < params.min_diversity * max(
                area, other_area
            ):
                too_close = True
                break
        if not too_close:
            accepted.append((area, rep, mask))

    regions = [
        Region.from_mask(mask.reshape(height, width), polarity, Detector.MSER)
        for _, _, mask in sorted(accepted, key=lambda item: item[1])
    ]
    logger.debug("MSER found %d %s regions", len(regions), polarity.value)
    return regions


def _components(mask: BoolMask, min_area: int) -> List[Tuple[Point, BoolMask]]:
    label_image, count = _label(mask)
    found = []
    for label in range(1, count + 1):
        component = label_image == label
        if component.sum() < min_area:
            continue
        rows, cols = np.nonzero(component)
        found.append(((float(cols.mean()), float(rows.mean())), component))
    return found


def detect_simple_blobs(
    diff: Raster,
    bands: ThresholdBands,
    polarity: Polarity,
    params: Optional[SimpleBlobParams] = None,
) -> List[Region]:
    """
    Threshold-sweep blob detector.

    Starting at the band edge, the threshold moves outward by ``step``. The
    connected components at consecutive thresholds whose centroids stay
    within ``centroid_merge`` pixels form one blob; a blob must persist over
    ``min_repeatability`` thresholds. The blob keeps the shape it had at its
    first threshold.
    """
    params = params or SimpleBlobParams()
    values = diff.values
    if polarity == Polarity.BRIGHT:
        thresholds = range(bands.bright_min, INTENSITY_MAX, params.step)
    else:
        thresholds = range(bands.dark_max, 0, -params.step)

    # each track: [centroid, length, first mask, last level]
    tracks: List[list] = []
    for level, threshold in enumerate(thresholds):
        mask = values > threshold if polarity == Polarity.BRIGHT else values < threshold
        components = _components(mask, params.min_area)
        active = [i for i, track in enumerate(tracks) if track[3] == level - 1]
        pairs = []
        for i in active:
            tx, ty = tracks[i][0]
            for j, ((cx, cy), _) in enumerate(components):
                distance = math.hypot(cx - tx, cy - ty)
                if distance <= params.centroid_merge:
                    pairs.append((distance, i, j))
        used_tracks, used_components = set(), set()
        for _, i, j in sorted(pairs):
            if i in used_tracks or j in used_components:
                continue
            used_tracks.add(i)
            used_components.add(j)
            tracks[i][0] = components[j][0]
            tracks[i][1] += 1
            tracks[i][3] = level
        for j, (centroid, component) in enumerate(components):
            if j not in used_components:
                tracks.append([centroid, 1, component, level])

    blobs = [
        Region.from_mask(track[2], polarity, Detector.SIMPLE_BLOB)
        for track in tracks
        if track[1] >= params.min_repeatability
    ]
    blobs.sort(key=lambda region: (region.centroid[1], region.centroid[0]))
    logger.debug("Simple blob detector found %d %s blobs", len(blobs), polarity.value)
    return blobs


def gradient_magnitude(
    diff: Raster, sigma: float = CANNY_SIGMA
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sobel gradient of the Gaussian-smoothed raster: magnitude, gx, gy."""
    smoothed = ndi.gaussian_filter(diff.values, sigma, mode="nearest")
    gx = ndi.sobel(smoothed, axis=1, mode="nearest")
    gy = ndi.sobel(smoothed, axis=0, mode="nearest")
    return np.hypot(gx, gy), gx, gy


def canny_edges(
    diff: Raster,
    strong: float = CANNY_STRONG,
    weak: float = CANNY_WEAK,
    sigma: float = CANNY_SIGMA,
) -> BoolMask:
    """
    Canny edge map.

    Gaussian smoothing, Sobel gradient, non-maximum suppression across the
    gradient direction and hysteresis: a pixel above ``weak`` is an edge only
    if it is 8-connected through edge pixels to one above ``strong``.
    """
    if not strong >= weak > 0:
        raise ValueError(
            "Canny thresholds need strong >= weak > 0.\n"
            f"| Got: strong={strong} weak={weak}"
        )
    magnitude, gx, gy = gradient_magnitude(diff, sigma)
    height, width = magnitude.shape
    padded = np.pad(magnitude, 1)

    def neighbour(dy: int, dx: int) -> np.ndarray:
        return padded[1 + dy : 1 + dy + height, 1 + dx : 1 + dx + width]

    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    sectors = [
        ((angle < 22.5) | (angle >= 157.5), (0, 1)),
        ((angle >= 22.5) & (angle < 67.5), (1, 1)),
        ((angle >= 67.5) & (angle < 112.5), (1, 0)),
        ((angle >= 112.5) & (angle < 157.5), (1, -1)),
    ]
    maxima = np.zeros_like(magnitude, dtype=bool)
    for sector, (dy, dx) in sectors:
        ahead = neighbour(dy, dx)
        behind = neighbour(-dy, -dx)
        maxima |= sector & (magnitude > behind) & (magnitude >= ahead)

    candidates = maxima & (magnitude >= weak)
    seeds = candidates & (magnitude >= strong)
    label_image, _ = _label(candidates, EIGHT_CONNECTED)
    keep = np.unique(label_image[seeds])
    return np.isin(label_image, keep[keep > 0])


def _overlap(first: Region, second: Region, width: int) -> int:
    return int(
        np.intersect1d(
            first.flat_indices(width), second.flat_indices(width), assume_unique=True
        ).size
    )


def merge_region_detections(
    *region_lists: Sequence[Region],
    width: int,
    overlap: float = REGION_MERGE_OVERLAP,
) -> List[Region]:
    """
    Unify regions of one polarity reported by several detectors.

    Regions are visited largest first; a region overlapping an accepted one
    by at least ``overlap`` of the smaller area is absorbed, adding its
    detector flags to the accepted region.
    """
    regions = [region for regions in region_lists for region in regions]
    regions.sort(key=lambda r: (-r.area_px, int(r.flat_indices(width).min())))
    merged: List[Region] = []
    for region in regions:
        for index, kept in enumerate(merged):
            shared = _overlap(region, kept, width)
            if shared and shared >= overlap * min(region.area_px, kept.area_px):
                flags = kept.detectors | region.detectors
                merged[index] = replace(kept, detectors=flags)
                break
        else:
            merged.append(region)
    return merged


def _pair_geometry(block: Region, shadow: Region) -> Tuple[float, float]:
    (bx, by), (sx, sy) = block.centroid, shadow.centroid
    return math.hypot(sx - bx, sy - by), azimuth_of(sx - bx, sy - by)


def _is_adequate_shadow(
    block: Region, shadow: Region, sun: SunGeometry, params: PairingParams
) -> bool:
    distance, angle = _pair_geometry(block, shadow)
    reach = max(params.distance_factor * block.equivalent_diameter, params.min_distance)
    return (
        angular_distance(angle, sun.anti_sun_azimuth) <= params.cone_deg
        and distance <= reach
        and shadow.area_px >= params.min_area_ratio * block.area_px
    )


def pair_blocks_shadows(
    bright: Sequence[Region],
    dark: Sequence[Region],
    sun: SunGeometry,
    params: Optional[PairingParams] = None,
) -> List[BlockCandidate]:
    """
    Link bright regions to shadows cast away from the sun.

    All adequate block-shadow pairs are assigned greedily by distance, then
    by larger shadow area, each region used once. Bright regions left
    without a shadow stay candidates only if both MSER and the simple blob
    detector found them.
    """
    params = params or PairingParams()
    options = []
    for i, block in enumerate(bright):
        for j, shadow in enumerate(dark):
            if _is_adequate_shadow(block, shadow, sun, params):
                distance, _ = _pair_geometry(block, shadow)
                options.append((distance, -shadow.area_px, i, j))
    shadow_of = {}
    used = set()
    for _, _, i, j in sorted(options):
        if i in shadow_of or j in used:
            continue
        shadow_of[i] = j
        used.add(j)

    candidates = []
    for i, block in enumerate(bright):
        if i in shadow_of:
            shadow = dark[shadow_of[i]]
            candidates.append(
                BlockCandidate(block, shadow, _pair_geometry(block, shadow)[1])
            )
        elif block.dual_detected:
            candidates.append(BlockCandidate(block))
    return candidates


def refine_with_edges(
    candidate: BlockCandidate,
    edges: BoolMask,
    diff: Raster,
    min_area: int = MIN_REGION_AREA,
) -> BlockCandidate:
    """
    Cut the block shape along edges.

    Edge pixels, dilated by one pixel, are removed from the block; the
    4-connected piece holding the block's brightest pixel remains. If the
    cut would leave less than ``min_area`` pixels the shape is kept.
    """
    block = candidate.block
    mask = block.to_mask(edges.shape)
    cut = ndi.binary_dilation(edges, structure=EIGHT_CONNECTED)
    if not np.any(mask & cut):
        return candidate
    remaining = mask & ~cut
    label_image, count = _label(remaining)
    if count == 0:
        return candidate
    peak = int(np.argmax(diff.values[block.rows, block.cols]))
    keep = int(label_image[block.rows[peak], block.cols[peak]])
    if keep == 0:
        maxima = ndi.maximum(diff.values, label_image, np.arange(1, count + 1))
        keep = int(np.argmax(maxima)) + 1
    piece = label_image == keep
    if piece.sum() < min_area:
        return candidate
    return replace(candidate, block=block.with_mask(piece))


def watershed_refine(
    after: Raster,
    bands_mask: BoolMask,
    refined: Sequence[BlockCandidate],
    min_area: int = MIN_REGION_AREA,
) -> List[BlockCandidate]:
    """
    Finalise block and shadow shapes by marker watershed on the 'after' image.

    Every block and shadow seeds its own marker. The exclusive disjunction
    of the threshold mask and these shapes is left unlabelled and flooded
    over the Sobel gradient of ``after``; all other pixels seed one
    background marker. Each shape is replaced by its basin.
    """
    if not refined:
        return []
    markers = np.zeros(after.shape, dtype=np.int32)
    for index, candidate in enumerate(refined):
        shapes = [(2 * index + 1, candidate.block), (2 * index + 2, candidate.shadow)]
        for label, region in shapes:
            if region is None:
                continue
            free = markers[region.rows, region.cols] == 0
            markers[region.rows[free], region.cols[free]] = label
    shapes_mask = markers > 0
    unknown = bands_mask ^ shapes_mask
    background = 2 * len(refined) + 1
    markers[~shapes_mask & ~unknown] = background
    basins = watershed(sobel(after.values), markers)

    finished = []
    for index, candidate in enumerate(refined):
        block_mask = basins == 2 * index + 1
        if block_mask.sum() < min_area:
            continue
        shadow = None
        if candidate.shadow is not None:
            shadow_mask = basins == 2 * index + 2
            if shadow_mask.sum() >= min_area:
                shadow = candidate.shadow.with_mask(shadow_mask)
        finished.append(
            BlockCandidate(
                candidate.block.with_mask(block_mask),
                shadow,
                candidate.pair_angle_deg if shadow is not None else None,
            )
        )
    return finished


def finalize_candidates(
    candidates: Sequence[BlockCandidate],
    sun: SunGeometry,
    params: Optional[PairingParams] = None,
) -> List[BlockCandidate]:
    """
    Re-check the pairing rule on final shapes.

    Shadows that no longer qualify are unlinked; shadow-less blocks survive
    only with both detectors behind them.
    """
    params = params or PairingParams()
    final = []
    for candidate in candidates:
        shadow = candidate.shadow
        if shadow is not None and _is_adequate_shadow(
            candidate.block, shadow, sun, params
        ):
            final.append(
                BlockCandidate(
                    candidate.block, shadow, _pair_geometry(candidate.block, shadow)[1]
                )
            )
        elif candidate.block.dual_detected:
            final.append(BlockCandidate(candidate.block))
    return final


@dataclass(eq=False)
class BlobResult:
    """Intermediate and final maps of one blob chain run."""

    bands: ThresholdBands
    bright_mask: BoolMask
    dark_mask: BoolMask
    edges: BoolMask
    bright: List[Region]
    dark: List[Region]
    paired: List[BlockCandidate]
    refined: List[BlockCandidate]
    shaped: List[BlockCandidate]
    final: List[BlockCandidate]


def run_blob_chain(
    diff: Raster,
    after: Raster,
    sun: SunGeometry,
    config: Optional[BlobConfig] = None,
) -> BlobResult:
    """Run the whole blob flow on one tile of difference and 'after' images."""
    config = config or BlobConfig()
    bands = compute_thresholds(diff, config.sigma_fraction)
    bright_mask, dark_mask = threshold_bands(diff, bands)
    canny = config.canny
    edges = canny_edges(diff, canny.strong, canny.weak, canny.sigma)

    by_polarity = {}
    for polarity in (Polarity.BRIGHT, Polarity.DARK):
        by_polarity[polarity] = merge_region_detections(
            detect_mser(diff, polarity, config.mser),
            detect_simple_blobs(diff, bands, polarity, config.simple_blob),
            width=diff.width,
            overlap=config.merge_overlap,
        )
    bright, dark = by_polarity[Polarity.BRIGHT], by_polarity[Polarity.DARK]

    paired = pair_blocks_shadows(bright, dark, sun, config.pairing)
    refined = [
        refine_with_edges(candidate, edges, diff, config.min_area)
        for candidate in paired
    ]
    shaped = watershed_refine(after, bright_mask | dark_mask, refined, config.min_area)
    final = finalize_candidates(shaped, sun, config.pairing)
    logger.debug(
        "Blob chain: %d bright, %d dark, %d paired, %d final",
        len(bright),
        len(dark),
        len(paired),
        len(final),
    )
    return BlobResult(
        bands,
        bright_mask,
        dark_mask,
        edges,
        bright,
        dark,
        paired,
        refined,
        shaped,
        final,
    )
