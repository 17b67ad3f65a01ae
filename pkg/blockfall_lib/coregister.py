"""Tile-wise sub-pixel co-registration of an ortho-rectified image pair."""

__all__ = [
    "Tile",
    "TileGrid",
    "AlignmentResult",
    "RegistrationConfig",
    "TileAlignment",
    "AlignedTilePair",
    "tile_grid",
    "ecc_align_translation",
    "coregister_pair",
    "assemble_aligned",
]

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from scipy import ndimage as ndi

from .base import CSVAble
from .constants import (
    BILATERAL_DIAMETER,
    BILATERAL_SIGMA_INTENSITY,
    BILATERAL_SIGMA_SPACE,
    ECC_CORRELATION_FLOOR,
    ECC_MAX_ITER,
    ECC_PYRAMID_LEVELS,
    ECC_SEARCH_BOUND,
    ECC_TOL,
    MIN_TILE_SIDE,
    NORMALIZE_PERCENTILES,
    TILE_SIZE,
)
from .exceptions import DimensionMismatchError, DivergedError, NoTextureError
from .raster import (
    Raster,
    Translation,
    bilateral_filter,
    normalize_to_reference,
    shift,
)
from .types import Pixels

logger = logging.getLogger(__name__)


class Tile(NamedTuple):
    index: int
    x: Pixels
    y: Pixels
    width: Pixels
    height: Pixels


@dataclass(frozen=True)
class TileGrid:
    """Row-major partition of an image into registration tiles."""

    tile_size: Pixels
    width: Pixels
    height: Pixels
    tiles: Tuple[Tile, ...]

    def __len__(self) -> int:
        return len(self.tiles)

    def __iter__(self):
        return iter(self.tiles)


@dataclass(frozen=True)
class AlignmentResult:
    translation: Translation
    final_correlation: float
    iterations: int
    converged: bool
    history: Tuple[float, ...] = ()
    """Correlation after every accepted iteration at the finest level."""


@dataclass(frozen=True)
class RegistrationConfig:
    tile_size: Pixels = TILE_SIZE
    max_iter: int = ECC_MAX_ITER
    tol: float = ECC_TOL
    search_bound: float = ECC_SEARCH_BOUND
    correlation_floor: float = ECC_CORRELATION_FLOOR
    pyramid_levels: int = ECC_PYRAMID_LEVELS
    bilateral_diameter: Pixels = BILATERAL_DIAMETER
    bilateral_sigma_intensity: float = BILATERAL_SIGMA_INTENSITY
    bilateral_sigma_space: float = BILATERAL_SIGMA_SPACE
    normalize_percentiles: Tuple[float, float] = NORMALIZE_PERCENTILES

    def __post_init__(self) -> None:
        if self.tile_size < 2 * MIN_TILE_SIDE:
            raise ValueError(
                f"tile_size must be >= {2 * MIN_TILE_SIDE}, got {self.tile_size}"
            )
        if self.max_iter < 1 or self.tol <= 0 or self.search_bound <= 0:
            raise ValueError("max_iter, tol and search_bound must be positive.")
        if not -1.0 <= self.correlation_floor <= 1.0:
            raise ValueError(
                f"correlation_floor must be in [-1, 1], got {self.correlation_floor}"
            )
        if self.pyramid_levels < 1:
            raise ValueError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")


class TileStatus:
    OK = "ok"
    NO_TEXTURE = "no_texture"
    DIVERGED = "diverged"
    NOT_CONVERGED = "not_converged"
    SKIPPED = "skipped"


@dataclass
class TileAlignment(CSVAble):
    """One line of the alignment log."""

    tile: Tile
    translation: Translation = field(default_factory=Translation)
    correlation: float = float("nan")
    iterations: int = 0
    converged: bool = False
    status: str = TileStatus.NOT_CONVERGED

    csv_header = (
        "tile_index",
        "origin_x",
        "origin_y",
        "dx",
        "dy",
        "correlation",
        "iterations",
        "converged",
        "status",
    )

    @property
    def aligned(self) -> bool:
        return self.status == TileStatus.OK

    @property
    def low_confidence(self) -> bool:
        """ECC ran on the tile and failed; its detections are marked."""
        return self.status in (
            TileStatus.NO_TEXTURE,
            TileStatus.DIVERGED,
            TileStatus.NOT_CONVERGED,
        )

    def to_csv_row(self) -> Dict[str, str]:
        return {
            "tile_index": str(self.tile.index),
            "origin_x": str(self.tile.x),
            "origin_y": str(self.tile.y),
            "dx": f"{self.translation.dx:.4f}",
            "dy": f"{self.translation.dy:.4f}",
            "correlation": f"{self.correlation:.6f}",
            "iterations": str(self.iterations),
            "converged": str(int(self.converged)),
            "status": self.status,
        }

    @staticmethod
    def parse_from_csv_row(row: Dict[str, str]) -> "TileAlignment":
        # Tile extent is not logged; it is recovered from the grid when needed.
        tile = Tile(
            int(row["tile_index"]), int(row["origin_x"]), int(row["origin_y"]), 0, 0
        )
        return TileAlignment(
            tile=tile,
            translation=Translation(float(row["dx"]), float(row["dy"])),
            correlation=float(row["correlation"]),
            iterations=int(row["iterations"]),
            converged=bool(int(row["converged"])),
            status=row.get("status", TileStatus.OK),
        )


@dataclass
class AlignedTilePair:
    tile: Tile
    before: Raster
    after: Raster
    alignment: TileAlignment


def _axis_spans(length: Pixels, tile_size: Pixels) -> List[Tuple[int, int]]:
    count, remainder = divmod(length, tile_size)
    if count == 0:
        return [(0, length)]
    spans = [(i * tile_size, tile_size) for i in range(count)]
    if remainder:
        if remainder < tile_size / 2:
            logger.debug("Merging %d px sliver into the last tile", remainder)
            start, size = spans[-1]
            spans[-1] = (start, size + remainder)
        else:
            spans.append((count * tile_size, remainder))
    return spans


def tile_grid(width: Pixels, height: Pixels, tile_size: Pixels = TILE_SIZE) -> TileGrid:
    """
    Split a ``width`` x ``height`` image into row-major tiles.

    Remainders narrower than half a tile merge into the neighbouring tile, so
    no tile is a sliver.
    """
    if width < tile_size / 2 or height < tile_size / 2 or min(width, height) < 1:
        raise ValueError(
            "Image is smaller than the minimum tile.\n"
            f"| Expected: both sides >= {tile_size / 2}\n"
            f"| Got: {width}x{height}"
        )
    tiles = []
    for y, tile_height in _axis_spans(height, tile_size):
        for x, tile_width in _axis_spans(width, tile_size):
            tiles.append(Tile(len(tiles), x, y, tile_width, tile_height))
    return TileGrid(tile_size, width, height, tuple(tiles))


class _EccLevel:
    """ECC state for one resolution of the template/moving pair."""

    def __init__(self, template: np.ndarray, moving: np.ndarray) -> None:
        self.template = template
        self.moving = moving
        self.grad_y, self.grad_x = np.gradient(moving)
        height, width = template.shape
        self.yy, self.xx = np.mgrid[0:height, 0:width].astype(np.float64)

    def _sample(self, image: np.ndarray, coords: np.ndarray) -> np.ndarray:
        return ndi.map_coordinates(image, coords, order=1, mode="nearest")

    def evaluate(self, p: np.ndarray):
        height, width = self.template.shape
        ys = self.yy + p[1]
        xs = self.xx + p[0]
        valid = (xs >= 0) & (xs <= width - 1) & (ys >= 0) & (ys <= height - 1)
        coords = np.array([ys[valid], xs[valid]])
        warped = self._sample(self.moving, coords)
        template = self.template[valid]
        template_zm = template - template.mean()
        warped_zm = warped - warped.mean()
        denominator = np.linalg.norm(template_zm) * np.linalg.norm(warped_zm)
        if denominator <= 1e-12:
            raise NoTextureError("Overlap of template and moving has no texture.")
        rho = float(template_zm @ warped_zm / denominator)
        return rho, valid, coords, template_zm, warped_zm

    def step(self, p: np.ndarray) -> np.ndarray:
        _, _, coords, template_zm, warped_zm = self.evaluate(p)
        jacobian = np.stack(
            [self._sample(self.grad_x, coords), self._sample(self.grad_y, coords)],
            axis=1,
        )
        jacobian -= jacobian.mean(axis=0)
        hessian = jacobian.T @ jacobian
        if abs(np.linalg.det(hessian)) <= 1e-12:
            raise NoTextureError("Moving image has no gradient to align on.")
        hessian_inv = np.linalg.inv(hessian)
        image_proj = jacobian.T @ warped_zm
        template_proj = jacobian.T @ template_zm
        lambda_n = warped_zm @ warped_zm - image_proj @ hessian_inv @ image_proj
        lambda_d = template_zm @ warped_zm - template_proj @ hessian_inv @ image_proj
        if lambda_d > 0:
            lam = lambda_n / lambda_d
        else:
            residual = template_zm @ template_zm - (
                template_proj @ hessian_inv @ template_proj
            )
            lam1 = math.sqrt(max(lambda_n, 0.0) / residual) if residual > 0 else 0.0
            lam2 = -lambda_d / residual if residual > 0 else 0.0
            lam = max(lam1, lam2)
        error = lam * template_zm - warped_zm
        return hessian_inv @ (jacobian.T @ error)


def _pyramid(values: np.ndarray, levels: int) -> List[np.ndarray]:
    pyramid = [values]
    for _ in range(levels - 1):
        current = pyramid[-1]
        if min(current.shape) < 2 * MIN_TILE_SIDE:
            break
        smoothed = ndi.gaussian_filter(current, 1.0, mode="nearest")
        pyramid.append(
            ndi.zoom(smoothed, 0.5, order=1, mode="nearest", grid_mode=True)
        )
    return pyramid[::-1]


def ecc_align_translation(
    template: Raster,
    moving: Raster,
    max_iter: int = ECC_MAX_ITER,
    tol: float = ECC_TOL,
    search_bound: float = ECC_SEARCH_BOUND,
    correlation_floor: float = ECC_CORRELATION_FLOOR,
    pyramid_levels: int = ECC_PYRAMID_LEVELS,
) -> AlignmentResult:
    """
    Find the translation of ``moving`` relative to ``template`` by Enhanced
    Correlation Coefficient maximisation.

    Gauss-Newton style ECC updates are run coarse-to-fine; a step is accepted
    only if it does not lower the zero-mean normalised correlation, halving
    it up to five times otherwise. Iteration stops after ``max_iter`` steps
    per level or when the correlation gain falls below ``tol``.

    :raises NoTextureError: constant template or moving raster.
    :raises DivergedError: the estimate left the ``search_bound`` disk.
    """
    if template.shape != moving.shape:
        raise DimensionMismatchError(
            "Template and moving rasters must share dimensions.\n"
            f"| Expected: {template.width}x{template.height}\n"
            f"| Got: {moving.width}x{moving.height}"
        )
    if np.ptp(template.values) == 0 or np.ptp(moving.values) == 0:
        raise NoTextureError("Cannot align a constant raster.")

    templates = _pyramid(template.values, pyramid_levels)
    movings = _pyramid(moving.values, pyramid_levels)
    p = np.zeros(2)
    iterations = 0
    history: List[float] = []
    rho = float("nan")
    for level, (template_level, moving_level) in enumerate(zip(templates, movings)):
        if level > 0:
            p = p * 2.0
        ecc = _EccLevel(template_level, moving_level)
        rho = ecc.evaluate(p)[0]
        history = [rho]
        for _ in range(max_iter):
            delta = ecc.step(p)
            accepted: Optional[np.ndarray] = None
            for _halving in range(6):
                candidate = p + delta
                candidate_rho = ecc.evaluate(candidate)[0]
                if candidate_rho >= rho:
                    accepted = candidate
                    break
                delta = delta / 2.0
            iterations += 1
            if accepted is None:
                break
            gain = candidate_rho - rho
            p, rho = accepted, candidate_rho
            history.append(rho)
            scale = 2.0 ** (len(templates) - 1 - level)
            if math.hypot(*p) * scale > search_bound:
                raise DivergedError(
                    "ECC left the search window.\n"
                    f"| Bound: {search_bound} px\n"
                    f"| Got: ({p[0] * scale:.2f}, {p[1] * scale:.2f})"
                )
            if gain < tol:
                break

    translation = Translation(float(p[0]), float(p[1]))
    return AlignmentResult(
        translation=translation,
        final_correlation=float(rho),
        iterations=iterations,
        converged=bool(rho >= correlation_floor),
        history=tuple(history),
    )


def _align_tile(
    before: Raster, after: Raster, tile: Tile, config: RegistrationConfig
) -> AlignedTilePair:
    before_tile = before.crop(tile.x, tile.y, tile.width, tile.height)
    after_tile = after.crop(tile.x, tile.y, tile.width, tile.height)
    record = TileAlignment(tile)
    try:
        filtered_before = bilateral_filter(
            before_tile,
            config.bilateral_diameter,
            config.bilateral_sigma_intensity,
            config.bilateral_sigma_space,
        )
        filtered_after = bilateral_filter(
            after_tile,
            config.bilateral_diameter,
            config.bilateral_sigma_intensity,
            config.bilateral_sigma_space,
        )
        normalized = normalize_to_reference(
            filtered_before, filtered_after, config.normalize_percentiles
        )
        if normalized.degenerate:
            raise NoTextureError("Before tile has no intensity spread.")
        result = ecc_align_translation(
            filtered_after,
            normalized.raster,
            max_iter=config.max_iter,
            tol=config.tol,
            search_bound=config.search_bound,
            correlation_floor=config.correlation_floor,
            pyramid_levels=config.pyramid_levels,
        )
    except NoTextureError as error:
        logger.warning("Tile %d left unaligned: %s", tile.index, error)
        record.status = TileStatus.NO_TEXTURE
        return AlignedTilePair(tile, before_tile, after_tile, record)
    except DivergedError as error:
        logger.warning("Tile %d left unaligned: %s", tile.index, error)
        record.status = TileStatus.DIVERGED
        return AlignedTilePair(tile, before_tile, after_tile, record)

    record.translation = result.translation
    record.correlation = result.final_correlation
    record.iterations = result.iterations
    record.converged = result.converged
    if not result.converged:
        logger.warning(
            "Tile %d did not converge (correlation %.3f)",
            tile.index,
            result.final_correlation,
        )
        return AlignedTilePair(tile, before_tile, after_tile, record)
    record.status = TileStatus.OK
    aligned_before = shift(before_tile, -result.translation)
    return AlignedTilePair(tile, aligned_before, after_tile, record)


def coregister_pair(
    before: Raster,
    after: Raster,
    config: Optional[RegistrationConfig] = None,
    workers: int = 1,
) -> List[AlignedTilePair]:
    """
    Co-register ``before`` onto ``after`` tile by tile.

    Alignment runs on bilateral-filtered, range-normalised copies; the found
    translation is applied to the unfiltered before-tile. Tiles that cannot
    be aligned are passed through unchanged and marked in their
    :py:class:`TileAlignment`. Results are ordered by tile index.
    """
    config = config or RegistrationConfig()
    if before.shape != after.shape:
        raise DimensionMismatchError(
            "Before and after rasters must share dimensions.\n"
            f"| Expected: {after.width}x{after.height}\n"
            f"| Got: {before.width}x{before.height}"
        )
    grid = tile_grid(after.width, after.height, config.tile_size)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(
                pool.map(lambda tile: _align_tile(before, after, tile, config), grid)
            )
    else:
        pairs = [_align_tile(before, after, tile, config) for tile in grid]
    aligned = sum(pair.alignment.aligned for pair in pairs)
    logger.info("Co-registered %d of %d tiles", aligned, len(pairs))
    return pairs


def assemble_aligned(
    pairs: List[AlignedTilePair], width: Pixels, height: Pixels
) -> Tuple[Raster, Raster]:
    """Stitch aligned tile pairs back into full-frame before/after rasters."""
    if not pairs:
        raise ValueError("No tiles to assemble.")
    before = np.zeros((height, width))
    after = np.zeros((height, width))
    for pair in pairs:
        tile = pair.tile
        before[tile.y : tile.y + tile.height, tile.x : tile.x + tile.width] = (
            pair.before.values
        )
        after[tile.y : tile.y + tile.height, tile.x : tile.x + tile.width] = (
            pair.after.values
        )
    scale = pairs[0].after.pixel_scale
    return Raster(before, scale), Raster(after, scale)
