"""
Scoring of final block maps against ground truth.

Detections are matched one-to-one to truth blocks, then counted per size
class into true positive and false discovery rates; matched pairs also feed
a linear fit of predicted against actual area.
"""

__all__ = [
    "SizeClass",
    "GroundTruthBlock",
    "Match",
    "RateRow",
    "AreaFit",
    "MetricsReport",
    "match_detections",
    "compute_rates",
    "area_regression",
    "aggregate",
    "format_table",
]

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .base import CSVAble
from .constants import MATCH_IOU, PIXEL_SCALE, SIZE_SPLIT_M2
from .fusion import FinalBlock
from .types import BoxTuple, MetersPerPixel, Point
from .utils import box_contains, box_iou, percent

logger = logging.getLogger(__name__)


class SizeClass:
    ALL = "all"
    LARGE = "large"
    SMALL = "small"


SIZE_CLASSES = (SizeClass.ALL, SizeClass.LARGE, SizeClass.SMALL)


@dataclass
class GroundTruthBlock(CSVAble):
    """Manually or synthetically identified new block."""

    id: int
    bbox: BoxTuple
    area_px: int
    centroid: Optional[Point] = None

    csv_header = ("id", "x", "y", "w", "h", "area_px", "centroid_x", "centroid_y")

    def __post_init__(self) -> None:
        _, _, width, height = self.bbox
        if self.area_px <= 0 or width <= 0 or height <= 0:
            raise ValueError(
                "Ground truth block must be non-empty.\n"
                f"| Got: id={self.id} bbox={self.bbox} area={self.area_px}"
            )
        if self.centroid is None:
            x, y, width, height = self.bbox
            self.centroid = (x + (width - 1) / 2, y + (height - 1) / 2)

    def to_csv_row(self) -> Dict[str, str]:
        x, y, width, height = self.bbox
        cx, cy = self.centroid or (float("nan"), float("nan"))
        return {
            "id": str(self.id),
            "x": str(int(x)),
            "y": str(int(y)),
            "w": str(int(width)),
            "h": str(int(height)),
            "area_px": str(self.area_px),
            "centroid_x": f"{cx:.3f}",
            "centroid_y": f"{cy:.3f}",
        }

    @staticmethod
    def parse_from_csv_row(row: Dict[str, str]) -> "GroundTruthBlock":
        bbox = (int(row["x"]), int(row["y"]), int(row["w"]), int(row["h"]))
        centroid = None
        if row.get("centroid_x") and row.get("centroid_y"):
            centroid = (float(row["centroid_x"]), float(row["centroid_y"]))
        area = row.get("area_px")
        return GroundTruthBlock(
            id=int(row["id"]),
            bbox=bbox,
            area_px=int(area) if area else bbox[2] * bbox[3],
            centroid=centroid,
        )


@dataclass(frozen=True)
class Match:
    truth_index: int
    predicted_index: int
    iou: float


@dataclass(frozen=True)
class RateRow(CSVAble):
    """Counts and rates of one size class of one region."""

    size_class: str
    total_actual: int
    total_predicted: int
    true_positives: int
    region: str = ""

    csv_header = (
        "region",
        "size_class",
        "actual",
        "predicted",
        "true_positives",
        "tpr",
        "fdr",
        "fdr_degenerate",
    )

    def __post_init__(self) -> None:
        if min(self.total_actual, self.total_predicted, self.true_positives) < 0:
            raise ValueError("Counts must be non-negative.")
        if self.true_positives > min(self.total_actual, self.total_predicted):
            raise ValueError(
                "True positives cannot exceed actual or predicted counts.\n"
                f"| Got: actual={self.total_actual} "
                f"predicted={self.total_predicted} tp={self.true_positives}"
            )

    @property
    def tpr(self) -> float:
        return percent(self.true_positives, self.total_actual)

    @property
    def fdr(self) -> float:
        """False discovery rate; 0 when nothing was predicted."""
        return percent(self.total_predicted - self.true_positives, self.total_predicted)

    @property
    def fdr_degenerate(self) -> bool:
        return self.total_predicted == 0

    def to_csv_row(self) -> Dict[str, str]:
        return {
            "region": self.region,
            "size_class": self.size_class,
            "actual": str(self.total_actual),
            "predicted": str(self.total_predicted),
            "true_positives": str(self.true_positives),
            "tpr": f"{self.tpr:.2f}",
            "fdr": f"{self.fdr:.2f}",
            "fdr_degenerate": str(int(self.fdr_degenerate)),
        }

    @staticmethod
    def parse_from_csv_row(row: Dict[str, str]) -> "RateRow":
        return RateRow(
            size_class=row["size_class"],
            total_actual=int(row["actual"]),
            total_predicted=int(row["predicted"]),
            true_positives=int(row["true_positives"]),
            region=row.get("region", ""),
        )


@dataclass(frozen=True)
class AreaFit:
    """Least-squares line ``predicted = slope * actual + offset``."""

    slope: float
    offset: float
    r_squared: float
    mean_abs_error_px: float
    n_pairs: int


@dataclass
class MetricsReport:
    region: str
    rows: Dict[str, RateRow]
    area_fit: Optional[AreaFit] = None
    area_pairs: List[Tuple[int, int]] = field(default_factory=list)
    """(actual, predicted) areas in pixels of every match."""

    def __getitem__(self, size_class: str) -> RateRow:
        return self.rows[size_class]


def match_detections(
    truth: Sequence[GroundTruthBlock],
    predicted: Sequence[FinalBlock],
    iou_min: float = MATCH_IOU,
) -> List[Match]:
    """
    Pair detections with truth blocks one-to-one.

    A pair qualifies when the boxes overlap with IoU of at least
    ``iou_min`` or the detection centroid falls inside the truth box.
    Qualifying pairs are taken greedily by descending IoU.
    """
    if not 0 < iou_min <= 1:
        raise ValueError(f"iou_min must be in (0, 1], got {iou_min}")
    options = []
    for i, block in enumerate(truth):
        for j, detection in enumerate(predicted):
            iou = box_iou(block.bbox, detection.bbox)
            if iou >= iou_min or box_contains(block.bbox, *detection.centroid):
                options.append((-iou, i, j))
    matches = []
    used_truth, used_predicted = set(), set()
    for neg_iou, i, j in sorted(options):
        if i in used_truth or j in used_predicted:
            continue
        used_truth.add(i)
        used_predicted.add(j)
        matches.append(Match(i, j, -neg_iou))
    return matches


def _size_class(area_px: float, pixel_scale: MetersPerPixel, split_m2: float) -> str:
    return SizeClass.LARGE if area_px * pixel_scale**2 > split_m2 else SizeClass.SMALL


def compute_rates(
    matches: Sequence[Match],
    truth: Sequence[GroundTruthBlock],
    predicted: Sequence[FinalBlock],
    pixel_scale: MetersPerPixel = PIXEL_SCALE,
    size_split_m2: float = SIZE_SPLIT_M2,
    region: str = "",
) -> MetricsReport:
    """
    Rates for all blocks and per size class.

    Truth blocks and their matches are binned by actual area; unmatched
    detections by their own area.
    """
    actual = {name: 0 for name in SIZE_CLASSES}
    positives = dict(actual)
    predictions = dict(actual)
    for block in truth:
        actual[SizeClass.ALL] += 1
        actual[_size_class(block.area_px, pixel_scale, size_split_m2)] += 1
    matched = {match.predicted_index: match for match in matches}
    for j, detection in enumerate(predicted):
        predictions[SizeClass.ALL] += 1
        if j in matched:
            area = truth[matched[j].truth_index].area_px
        else:
            area = detection.area_px
        predictions[_size_class(area, pixel_scale, size_split_m2)] += 1
    for match in matches:
        positives[SizeClass.ALL] += 1
        area = truth[match.truth_index].area_px
        positives[_size_class(area, pixel_scale, size_split_m2)] += 1

    rows = {
        name: RateRow(name, actual[name], predictions[name], positives[name], region)
        for name in SIZE_CLASSES
    }
    pairs = [
        (truth[m.truth_index].area_px, predicted[m.predicted_index].area_px)
        for m in matches
    ]
    fit = None
    if len({actual for actual, _ in pairs}) > 1:
        fit = area_regression(pairs)
    else:
        logger.debug("No spread in matched areas of %s", region or "region")
    return MetricsReport(region, rows, fit, pairs)


def area_regression(pairs: Sequence[Tuple[float, float]]) -> AreaFit:
    """
    Fit predicted against actual area by least squares.

    :raises ValueError: fewer than two pairs, or no spread in actual area.
    """
    if len(pairs) < 2:
        raise ValueError(f"Area regression needs >= 2 pairs, got {len(pairs)}")
    data = np.asarray(pairs, dtype=np.float64)
    actual, predicted = data[:, 0], data[:, 1]
    if np.ptp(actual) == 0:
        raise ValueError("Actual areas must not all be equal.")
    design = np.column_stack([actual, np.ones_like(actual)])
    (slope, offset), *_ = np.linalg.lstsq(design, predicted, rcond=None)
    residual = predicted - (slope * actual + offset)
    ss_res = float(residual @ residual)
    ss_tot = float(np.sum((predicted - predicted.mean()) ** 2))
    if ss_tot > 0:
        r_squared = 1.0 - ss_res / ss_tot
    else:
        r_squared = 1.0 if ss_res <= 1e-12 else 0.0
    return AreaFit(
        slope=float(slope),
        offset=float(offset),
        r_squared=float(r_squared),
        mean_abs_error_px=float(np.mean(np.abs(predicted - actual))),
        n_pairs=len(pairs),
    )


def aggregate(reports: Sequence[MetricsReport], region: str = "total") -> MetricsReport:
    """Sum the counts of several region reports into one."""
    rows = {}
    for name in SIZE_CLASSES:
        members = [report.rows[name] for report in reports if name in report.rows]
        rows[name] = RateRow(
            name,
            sum(row.total_actual for row in members),
            sum(row.total_predicted for row in members),
            sum(row.true_positives for row in members),
            region,
        )
    pairs = [pair for report in reports for pair in report.area_pairs]
    fit = None
    if len(pairs) >= 2 and len({actual for actual, _ in pairs}) > 1:
        fit = area_regression(pairs)
    return MetricsReport(region, rows, fit, pairs)


def _class_label(size_class: str, split_m2: float) -> str:
    return {
        SizeClass.ALL: "all",
        SizeClass.LARGE: f"> {split_m2:g} m2",
        SizeClass.SMALL: f"<= {split_m2:g} m2",
    }[size_class]


def format_table(
    reports: Sequence[MetricsReport],
    size_classes: Sequence[str] = (SizeClass.ALL, SizeClass.LARGE),
    size_split_m2: float = SIZE_SPLIT_M2,
) -> str:
    """Plain text table with one line per region and size class."""
    header = ("Region", "Size", "Actual", "Predicted", "TP", "TPR %", "FDR %")
    lines = []
    for report in reports:
        for name in size_classes:
            row = report.rows[name]
            lines.append(
                (
                    report.region,
                    _class_label(name, size_split_m2),
                    str(row.total_actual),
                    str(row.total_predicted),
                    str(row.true_positives),
                    f"{row.tpr:.2f}",
                    f"{row.fdr:.2f}",
                )
            )
    widths = [
        max(len(str(cell)) for cell in column) for column in zip(header, *lines)
    ]
    rendered = [
        "  ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip()
        for line in [header, *lines]
    ]
    rendered.insert(1, "  ".join("-" * width for width in widths))
    fits = [report for report in reports if report.area_fit is not None]
    for report in fits:
        fit = report.area_fit
        assert fit is not None
        rendered.append(
            f"{report.region}: area slope {fit.slope:.3f}, offset {fit.offset:.3f}, "
            f"R2 {fit.r_squared:.3f}, mean abs error {fit.mean_abs_error_px:.2f} px"
        )
    return "\n".join(rendered) + "\n"
