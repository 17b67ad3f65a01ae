"""Histogram of Oriented Gradients descriptors and training sample harvest."""

__all__ = [
    "HogLayout",
    "HogDescriptor",
    "AnnotationBox",
    "SampleSet",
    "compute_hog",
    "hog_block_grid",
    "extract_samples",
]

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from .base import CSVAble
from .constants import (
    BLOCK_CELLS,
    BLOCK_STRIDE,
    CELL_SIZE,
    L2HYS_CLIP,
    MIN_ANNOTATION_HEIGHT,
    MIN_ANNOTATION_WIDTH,
    NEGATIVE_STRIDE,
    NORM_EPS,
    ORIENTATION_BINS,
    POSITIVE_ASPECT,
    WINDOW_HEIGHT,
    WINDOW_WIDTH,
)
from .raster import Raster, resize
from .types import BoolMask, Pixels

logger = logging.getLogger(__name__)

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass(frozen=True)
class HogLayout:
    """
    Geometry of the descriptor.

    With the defaults a 64x80 window holds 7x9 overlapping blocks of 2x2
    cells, 9 unsigned orientation bins each: 2268 values.
    """

    window_width: Pixels = WINDOW_WIDTH
    window_height: Pixels = WINDOW_HEIGHT
    cell: Pixels = CELL_SIZE
    block_cells: int = BLOCK_CELLS
    block_stride: Pixels = BLOCK_STRIDE
    bins: int = ORIENTATION_BINS

    def __post_init__(self) -> None:
        if self.window_width % self.cell or self.window_height % self.cell:
            raise ValueError(
                "Window must be divisible by the cell size.\n"
                f"| Got: window {self.window_width}x{self.window_height}, "
                f"cell {self.cell}"
            )
        if self.block_stride % self.cell or self.block_stride <= 0:
            raise ValueError(
                "Block stride must be a positive multiple of the cell size.\n"
                f"| Got: {self.block_stride}"
            )
        if self.block_size > min(self.window_width, self.window_height):
            raise ValueError("Block does not fit into the window.")
        if self.bins < 2:
            raise ValueError(f"Need at least 2 orientation bins, got {self.bins}")

    @property
    def block_size(self) -> Pixels:
        return self.cell * self.block_cells

    @property
    def blocks_x(self) -> int:
        return (self.window_width - self.block_size) // self.block_stride + 1

    @property
    def blocks_y(self) -> int:
        return (self.window_height - self.block_size) // self.block_stride + 1

    @property
    def block_length(self) -> int:
        return self.block_cells * self.block_cells * self.bins

    @property
    def descriptor_length(self) -> int:
        return self.blocks_x * self.blocks_y * self.block_length


@dataclass(eq=False)
class HogDescriptor:
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("HOG descriptor entries must be finite and >= 0.")
        self.values = values

    def __len__(self) -> int:
        return int(self.values.size)


def _gradients(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Centred [-1, 0, 1] gradients; magnitude and unsigned angle in degrees."""
    padded = np.pad(values, 1, mode="edge")
    gx = padded[1:-1, 2:] - padded[1:-1, :-2]
    gy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    magnitude = np.hypot(gx, gy)
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    return magnitude, angle


def _cell_weights(layout: HogLayout) -> np.ndarray:
    """
    Spatial vote weights inside one block.

    ``weights[k, h, r]`` is the share a pixel at offset ``r`` of the block's
    ``h``-th cell gives to cell ``k``: linear in the distance to the cell
    centre, zero beyond one cell.
    """
    cells = layout.block_cells
    size = layout.cell
    weights = np.zeros((cells, cells, size))
    for k in range(cells):
        centre = k * size + (size - 1) / 2.0
        for h in range(cells):
            offsets = h * size + np.arange(size)
            weights[k, h] = np.clip(1.0 - np.abs(offsets - centre) / size, 0.0, 1.0)
    return weights


def _l2hys(blocks: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(blocks**2, axis=-1, keepdims=True) + NORM_EPS**2)
    blocks = np.minimum(blocks / norm, L2HYS_CLIP)
    norm = np.sqrt(np.sum(blocks**2, axis=-1, keepdims=True) + NORM_EPS**2)
    return blocks / norm


def hog_block_grid(
    values: np.ndarray, layout: Optional[HogLayout] = None
) -> np.ndarray:
    """
    L2-Hys normalised block histograms over a whole image.

    Returns an array ``(blocks_y, blocks_x, block_length)`` for blocks placed
    every ``block_stride`` pixels from the top-left corner. Pixels vote
    bilinearly into the two nearest orientation bins and into the cells of
    their block. A cell-aligned window reads the same numbers as
    :py:func:`compute_hog` on that window except where its border
    gradients see pixels outside it. Trailing pixels that do not fill a
    cell are ignored.
    """
    layout = layout or HogLayout()
    cell, cells, bins = layout.cell, layout.block_cells, layout.bins
    cells_y = values.shape[0] // cell
    cells_x = values.shape[1] // cell
    if cells_y < cells or cells_x < cells:
        raise ValueError(
            "Image is smaller than one HOG block.\n"
            f"| Got: {values.shape[1]}x{values.shape[0]}"
        )
    magnitude, angle = _gradients(np.asarray(values, dtype=np.float64))
    magnitude = magnitude[: cells_y * cell, : cells_x * cell]
    angle = angle[: cells_y * cell, : cells_x * cell]

    position = angle / (180.0 / bins)
    lower = np.floor(position)
    upper_share = position - lower
    lower_bin = lower.astype(int) % bins
    upper_bin = (lower_bin + 1) % bins

    weights = _cell_weights(layout)
    # kernel[(r, s), (ky, hy, kx, hx)] = weights[ky, hy, r] * weights[kx, hx, s]
    kernel = np.einsum("khr,lgs->rskhlg", weights, weights).reshape(
        cell * cell, cells**4
    )
    contributions = np.empty((cells_y, cells_x, bins, cells, cells, cells, cells))
    for b in range(bins):
        votes = magnitude * (
            np.where(lower_bin == b, 1.0 - upper_share, 0.0)
            + np.where(upper_bin == b, upper_share, 0.0)
        )
        per_cell = votes.reshape(cells_y, cell, cells_x, cell).transpose(0, 2, 1, 3)
        contributions[:, :, b] = (
            per_cell.reshape(cells_y * cells_x, cell * cell) @ kernel
        ).reshape(cells_y, cells_x, cells, cells, cells, cells)

    grid_y = cells_y - cells + 1
    grid_x = cells_x - cells + 1
    histograms = np.zeros((grid_y, grid_x, bins, cells, cells))
    for hy in range(cells):
        for hx in range(cells):
            histograms += contributions[
                hy : hy + grid_y, hx : hx + grid_x, :, :, hy, :, hx
            ]
    step = layout.block_stride // cell
    blocks = histograms[::step, ::step].transpose(0, 1, 3, 4, 2)
    blocks = blocks.reshape(blocks.shape[0], blocks.shape[1], layout.block_length)
    return _l2hys(blocks)


def compute_hog(window: Raster, layout: Optional[HogLayout] = None) -> HogDescriptor:
    """
    Describe one detection window.

    Blocks are concatenated row by row; inside a block the cells run row by
    row and each cell holds its ``bins`` orientation votes.
    """
    layout = layout or HogLayout()
    if (window.width, window.height) != (layout.window_width, layout.window_height):
        raise ValueError(
            "Wrong HOG window size.\n"
            f"| Expected: {layout.window_width}x{layout.window_height}\n"
            f"| Got: {window.width}x{window.height}"
        )
    return HogDescriptor(hog_block_grid(window.values, layout).ravel())


@dataclass
class AnnotationBox(CSVAble):
    """Annotated rectangle of a training image."""

    x: Pixels
    y: Pixels
    width: Pixels
    height: Pixels
    label: str = POSITIVE

    csv_header = ("x", "y", "w", "h", "label")

    def __post_init__(self) -> None:
        if self.label not in (POSITIVE, NEGATIVE):
            raise ValueError(
                "Annotation label must be `positive` or `negative`.\n"
                f"| Got: `{self.label}`"
            )

    @property
    def box(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.width, self.height)

    def to_csv_row(self) -> Dict[str, str]:
        return {
            "x": str(self.x),
            "y": str(self.y),
            "w": str(self.width),
            "h": str(self.height),
            "label": self.label,
        }

    @staticmethod
    def parse_from_csv_row(row: Dict[str, str]) -> "AnnotationBox":
        return AnnotationBox(
            x=int(row["x"]),
            y=int(row["y"]),
            width=int(row["w"]),
            height=int(row["h"]),
            label=row["label"].strip().lower(),
        )


@dataclass(eq=False)
class SampleSet:
    """
    Described training windows of one source image.

    Descriptors are kept as matrices, one row per window.
    """

    positives: np.ndarray
    negatives: np.ndarray
    source: str = "after"
    layout: HogLayout = field(default_factory=HogLayout)

    def __post_init__(self) -> None:
        length = self.layout.descriptor_length
        self.positives = np.asarray(self.positives, dtype=np.float64)
        self.positives = self.positives.reshape(-1, length)
        self.negatives = np.asarray(self.negatives, dtype=np.float64)
        self.negatives = self.negatives.reshape(-1, length)

    @classmethod
    def empty(cls, source: str = "after", layout: Optional[HogLayout] = None):
        layout = layout or HogLayout()
        zeros = np.zeros((0, layout.descriptor_length))
        return cls(zeros, zeros.copy(), source, layout)

    def __len__(self) -> int:
        return len(self.positives) + len(self.negatives)

    def __repr__(self) -> str:
        return (
            f"<SampleSet {self.source}: {len(self.positives)} positive, "
            f"{len(self.negatives)} negative>"
        )

    def descriptors(self) -> Iterator[HogDescriptor]:
        for row in np.vstack([self.positives, self.negatives]):
            yield HogDescriptor(row)

    def matrix(self) -> Tuple[np.ndarray, np.ndarray]:
        """Feature matrix and +1/-1 targets, positives first."""
        features = np.vstack([self.positives, self.negatives])
        targets = np.concatenate(
            [np.ones(len(self.positives)), -np.ones(len(self.negatives))]
        )
        return features, targets


def _fit_aspect(
    box: AnnotationBox, aspect: float, image_width: int, image_height: int
) -> Tuple[int, int, int, int]:
    """Grow a box around its centre to ``width / height == aspect``."""
    width, height = box.width, box.height
    if width / height > aspect:
        height = int(round(width / aspect))
    else:
        width = int(round(height * aspect))
    width, height = min(width, image_width), min(height, image_height)
    x = int(round(box.x + box.width / 2 - width / 2))
    y = int(round(box.y + box.height / 2 - height / 2))
    x = min(max(x, 0), image_width - width)
    y = min(max(y, 0), image_height - height)
    return x, y, width, height


def _negative_windows(
    box: AnnotationBox, layout: HogLayout, stride: Pixels
) -> Iterable[Tuple[int, int, int, int]]:
    if box.width < layout.window_width or box.height < layout.window_height:
        yield (box.x, box.y, box.width, box.height)
        return
    for y in range(box.y, box.y + box.height - layout.window_height + 1, stride):
        for x in range(box.x, box.x + box.width - layout.window_width + 1, stride):
            yield (x, y, layout.window_width, layout.window_height)


def _describe(image: Raster, window: Tuple[int, int, int, int], layout: HogLayout):
    x, y, width, height = window
    crop = image.crop(x, y, width, height)
    return compute_hog(resize(crop, layout.window_width, layout.window_height), layout)


def extract_samples(
    image: Raster,
    annotations: Iterable[AnnotationBox],
    layout: Optional[HogLayout] = None,
    source: str = "after",
    exclusion: Optional[BoolMask] = None,
    negative_stride: Pixels = NEGATIVE_STRIDE,
) -> SampleSet:
    """
    Describe the annotated windows of a training image.

    Positive boxes are grown to a 4:5 side ratio and resized to the window.
    Negative boxes are tiled with windows every ``negative_stride`` pixels;
    a negative box smaller than one window is resized to it as a whole.
    Windows touching ``exclusion`` are skipped.

    :raises ValueError: a box leaves the image.
    """
    layout = layout or HogLayout()
    positives: List[np.ndarray] = []
    negatives: List[np.ndarray] = []
    excluded = 0
    aspect = layout.window_width / layout.window_height
    if abs(aspect - POSITIVE_ASPECT) > 1e-9:
        logger.debug("Window aspect %.3f differs from 4:5", aspect)

    def is_excluded(window: Tuple[int, int, int, int]) -> bool:
        if exclusion is None:
            return False
        x, y, width, height = window
        return bool(np.any(exclusion[y : y + height, x : x + width]))

    for box in annotations:
        if (
            box.x < 0
            or box.y < 0
            or box.x + box.width > image.width
            or box.y + box.height > image.height
        ):
            raise ValueError(
                "Annotation box outside image.\n"
                f"| Image: {image.width}x{image.height}\n"
                f"| Got: {box}"
            )
        if box.width < MIN_ANNOTATION_WIDTH or box.height < MIN_ANNOTATION_HEIGHT:
            logger.warning("Skipping annotation smaller than 8x10 px: %s", box)
            continue
        if box.label == POSITIVE:
            window = _fit_aspect(box, aspect, image.width, image.height)
            if is_excluded(window):
                excluded += 1
                continue
            positives.append(_describe(image, window, layout).values)
        else:
            for window in _negative_windows(box, layout, negative_stride):
                if is_excluded(window):
                    excluded += 1
                    continue
                negatives.append(_describe(image, window, layout).values)

    length = layout.descriptor_length
    samples = SampleSet(
        np.array(positives).reshape(-1, length),
        np.array(negatives).reshape(-1, length),
        source,
        layout,
    )
    logger.info(
        "Harvested %d positive and %d negative %s samples (%d excluded)",
        len(samples.positives),
        len(samples.negatives),
        source,
        excluded,
    )
    return samples
