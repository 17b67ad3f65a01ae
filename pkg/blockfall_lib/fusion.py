"""Combination of SVM detections with blob candidates into the final map."""

__all__ = ["Provenance", "FinalBlock", "accepts", "fuse"]

import enum
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

from .base import CSVAble
from .blob import BlockCandidate, Detector, Region
from .constants import PIXEL_SCALE
from .svm import DetectionBox
from .types import BoxTuple, MetersPerPixel, Point

logger = logging.getLogger(__name__)


class Provenance(enum.Flag):
    """Evidence behind a final block."""

    NONE = 0
    AFTER_SVM = enum.auto()
    DIFFERENCE_SVM = enum.auto()
    MSER = enum.auto()
    SIMPLE_BLOB = enum.auto()
    SHADOW = enum.auto()

    def to_text(self) -> str:
        names = [flag.name.lower() for flag in _PROVENANCE_ORDER if flag in self]
        return "|".join(names)

    @classmethod
    def from_text(cls, text: str) -> "Provenance":
        value = cls.NONE
        for name in filter(None, text.strip().split("|")):
            try:
                value |= cls[name.upper()]
            except KeyError:
                raise ValueError(f"Unknown provenance flag `{name}`") from None
        return value


_PROVENANCE_ORDER = (
    Provenance.AFTER_SVM,
    Provenance.DIFFERENCE_SVM,
    Provenance.MSER,
    Provenance.SIMPLE_BLOB,
    Provenance.SHADOW,
)


@dataclass(eq=False)
class FinalBlock(CSVAble):
    """
    Accepted new block.

    ``shape`` holds the block pixels (never the shadow) and is only available
    on freshly fused blocks; blocks read back from CSV carry the summary
    geometry alone.
    """

    id: int
    centroid: Point
    bbox: BoxTuple
    area_px: int
    pixel_scale: MetersPerPixel = PIXEL_SCALE
    has_shadow: bool = False
    provenance: Provenance = Provenance.NONE
    tile: int = 0
    registration_confidence: float = float("nan")
    low_confidence_registration: bool = False
    shape: Optional[Region] = None

    csv_header = (
        "id",
        "tile",
        "centroid_x",
        "centroid_y",
        "x",
        "y",
        "w",
        "h",
        "area_px",
        "area_m2",
        "has_shadow",
        "provenance",
        "registration_confidence",
        "low_confidence_registration",
    )

    def __post_init__(self) -> None:
        if self.area_px <= 0 or self.pixel_scale <= 0:
            raise ValueError(
                "Final block area must be positive.\n"
                f"| Got: {self.area_px} px at {self.pixel_scale} m/px"
            )

    @classmethod
    def from_candidate(
        cls,
        block_id: int,
        candidate: BlockCandidate,
        provenance: Provenance,
        pixel_scale: MetersPerPixel = PIXEL_SCALE,
        tile: int = 0,
        registration_confidence: float = float("nan"),
        low_confidence_registration: bool = False,
    ) -> "FinalBlock":
        block = candidate.block
        return cls(
            id=block_id,
            centroid=block.centroid,
            bbox=block.bbox,
            area_px=block.area_px,
            pixel_scale=pixel_scale,
            has_shadow=candidate.has_shadow,
            provenance=provenance,
            tile=tile,
            registration_confidence=registration_confidence,
            low_confidence_registration=low_confidence_registration,
            shape=block,
        )

    @property
    def area_m2(self) -> float:
        return self.area_px * self.pixel_scale**2

    def to_csv_row(self) -> Dict[str, str]:
        x, y, width, height = self.bbox
        return {
            "id": str(self.id),
            "tile": str(self.tile),
            "centroid_x": f"{self.centroid[0]:.3f}",
            "centroid_y": f"{self.centroid[1]:.3f}",
            "x": str(int(x)),
            "y": str(int(y)),
            "w": str(int(width)),
            "h": str(int(height)),
            "area_px": str(self.area_px),
            "area_m2": f"{self.area_m2:.4f}",
            "has_shadow": str(int(self.has_shadow)),
            "provenance": self.provenance.to_text(),
            "registration_confidence": f"{self.registration_confidence:.6f}",
            "low_confidence_registration": str(int(self.low_confidence_registration)),
        }

    @staticmethod
    def parse_from_csv_row(row: Dict[str, str]) -> "FinalBlock":
        area_px = int(row["area_px"])
        area_m2 = float(row.get("area_m2") or "nan")
        pixel_scale = (
            math.sqrt(area_m2 / area_px) if math.isfinite(area_m2) else PIXEL_SCALE
        )
        return FinalBlock(
            id=int(row["id"]),
            centroid=(float(row["centroid_x"]), float(row["centroid_y"])),
            bbox=(int(row["x"]), int(row["y"]), int(row["w"]), int(row["h"])),
            area_px=area_px,
            pixel_scale=pixel_scale,
            has_shadow=bool(int(row["has_shadow"])),
            provenance=Provenance.from_text(row.get("provenance", "")),
            tile=int(row.get("tile") or 0),
            registration_confidence=float(
                row.get("registration_confidence") or "nan"
            ),
            low_confidence_registration=bool(
                int(row.get("low_confidence_registration") or 0)
            ),
        )


def accepts(
    has_shadow: bool, after_hit: bool, diff_hit: bool, before_hit: bool
) -> bool:
    """
    Acceptance rule for one candidate.

    A shadowed block needs an 'after' or difference detection; a shadow-less
    block needs both. A 'before' detection at the same place vetoes either.
    """
    if before_hit:
        return False
    if has_shadow:
        return after_hit or diff_hit
    return after_hit and diff_hit


def _hit(boxes: Sequence[DetectionBox], x: float, y: float) -> bool:
    return any(box.contains(x, y) for box in boxes)


def fuse(
    candidates: Sequence[BlockCandidate],
    boxes_before: Sequence[DetectionBox],
    boxes_after: Sequence[DetectionBox],
    boxes_diff: Sequence[DetectionBox],
    pixel_scale: MetersPerPixel = PIXEL_SCALE,
    tile: int = 0,
    registration_confidence: float = float("nan"),
    low_confidence_registration: bool = False,
    first_id: int = 1,
) -> List[FinalBlock]:
    """
    Keep the blob candidates the SVM maps confirm.

    A candidate is located by its block centroid; being inside a box counts
    as a detection in that map. See :py:func:`accepts` for the rule. Boxes
    and candidates must share one coordinate frame. Blocks from a tile whose
    registration failed carry ``low_confidence_registration``.
    """
    accepted = []
    for candidate in candidates:
        x, y = candidate.block.centroid
        after_hit = _hit(boxes_after, x, y)
        diff_hit = _hit(boxes_diff, x, y)
        before_hit = _hit(boxes_before, x, y)
        if not accepts(candidate.has_shadow, after_hit, diff_hit, before_hit):
            continue
        provenance = Provenance.NONE
        if after_hit:
            provenance |= Provenance.AFTER_SVM
        if diff_hit:
            provenance |= Provenance.DIFFERENCE_SVM
        if Detector.MSER in candidate.block.detectors:
            provenance |= Provenance.MSER
        if Detector.SIMPLE_BLOB in candidate.block.detectors:
            provenance |= Provenance.SIMPLE_BLOB
        if candidate.has_shadow:
            provenance |= Provenance.SHADOW
        accepted.append(
            FinalBlock.from_candidate(
                first_id + len(accepted),
                candidate,
                provenance,
                pixel_scale,
                tile,
                registration_confidence,
                low_confidence_registration,
            )
        )
    logger.debug("Fused %d of %d candidates", len(accepted), len(candidates))
    return accepted
