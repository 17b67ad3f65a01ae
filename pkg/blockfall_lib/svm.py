"""Linear epsilon-SVR training and multi-scale sliding-window detection."""

__all__ = [
    "TrainingMeta",
    "SvrModel",
    "DetectionBox",
    "fit_linear_svr",
    "train_svr",
    "score",
    "pyramid_scales",
    "detect_multiscale",
    "group_detections",
]

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .base import CSVAble
from .constants import (
    DETECTION_STRIDE,
    GROUP_IOU,
    GROUP_MIN_VOTES,
    HIT_THRESHOLD,
    SCALE_FACTOR,
    SVR_BIAS_SCALE,
    SVR_C,
    SVR_EPSILON,
    SVR_MAX_PASSES,
    SVR_TOL,
    UPSCALE_FACTOR,
)
from .exceptions import EmptyClassError
from .hog import HogDescriptor, HogLayout, SampleSet, hog_block_grid
from .raster import Raster, resize
from .types import BoxTuple

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingMeta:
    n_positive: int = 0
    n_negative: int = 0
    seed: int = 0
    objective: float = float("nan")
    """Primal objective of the returned model."""
    passes: int = 0
    relative_gap: float = float("nan")
    converged: bool = False
    dual_history: Tuple[float, ...] = ()
    """Dual objective after every pass; non-increasing."""


@dataclass(eq=False)
class SvrModel:
    """
    Linear regressor ``w . d + b`` trained against +1/-1 targets.

    :param weights: One weight per descriptor component.
    :param bias: Intercept.
    :param epsilon: Width of the insensitive tube used in training.
    :param C: Loss weight used in training.
    :param bias_scale: Constant feature appended to every sample to carry
        the intercept; the intercept is regularised as ``(b / bias_scale)**2``.
    """

    weights: np.ndarray
    bias: float = 0.0
    epsilon: float = SVR_EPSILON
    C: float = SVR_C
    bias_scale: float = SVR_BIAS_SCALE
    layout: HogLayout = field(default_factory=HogLayout)
    meta: TrainingMeta = field(default_factory=TrainingMeta)

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.weights)) or not math.isfinite(self.bias):
            raise ValueError("Model weights and bias must be finite.")

    def __repr__(self) -> str:
        return (
            f"<SvrModel {self.weights.size} weights, bias {self.bias:.4f}, "
            f"eps={self.epsilon} C={self.C}>"
        )

    @property
    def matches_layout(self) -> bool:
        return self.weights.size == self.layout.descriptor_length


@dataclass
class DetectionBox(CSVAble):
    """Window that scored above the hit threshold, in original pixels."""

    x: float
    y: float
    width: float
    height: float
    score: float
    source: str = "after"
    low_confidence_registration: bool = False

    csv_header = ("x", "y", "w", "h", "score", "source", "low_confidence_registration")

    @property
    def box(self) -> BoxTuple:
        return (self.x, self.y, self.width, self.height)

    def contains(self, x: float, y: float) -> bool:
        return (
            self.x <= x <= self.x + self.width and self.y <= y <= self.y + self.height
        )

    def to_csv_row(self) -> Dict[str, str]:
        return {
            "x": f"{self.x:.3f}",
            "y": f"{self.y:.3f}",
            "w": f"{self.width:.3f}",
            "h": f"{self.height:.3f}",
            "score": f"{self.score:.6f}",
            "source": self.source,
            "low_confidence_registration": str(int(self.low_confidence_registration)),
        }

    @staticmethod
    def parse_from_csv_row(row: Dict[str, str]) -> "DetectionBox":
        return DetectionBox(
            x=float(row["x"]),
            y=float(row["y"]),
            width=float(row["w"]),
            height=float(row["h"]),
            score=float(row["score"]),
            source=row.get("source", "after"),
            low_confidence_registration=bool(
                int(row.get("low_confidence_registration") or 0)
            ),
        )


def _primal_objective(
    features: np.ndarray, targets: np.ndarray, w: np.ndarray, epsilon: float, C: float
) -> float:
    residual = np.abs(targets - features @ w)
    return float(0.5 * w @ w + C * np.maximum(residual - epsilon, 0.0).sum())


def fit_linear_svr(
    features: np.ndarray,
    targets: np.ndarray,
    epsilon: float = SVR_EPSILON,
    C: float = SVR_C,
    seed: int = 0,
    bias_scale: float = SVR_BIAS_SCALE,
    tol: float = SVR_TOL,
    max_passes: int = SVR_MAX_PASSES,
) -> Tuple[np.ndarray, float, TrainingMeta]:
    """
    Dual coordinate descent for L1-loss linear epsilon-SVR.

    Minimises ``0.5 * |w|**2 + 0.5 * (b / bias_scale)**2 + C * sum(max(0,
    |y - w.x - b| - epsilon))``. Each step minimises the dual exactly along
    one coordinate, in a seeded random order per pass, so the dual objective
    never increases. Training stops when the relative duality gap drops
    below ``tol`` or after ``max_passes`` passes.

    :returns: weights, bias and training metadata.
    """
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if features.ndim != 2 or features.shape[0] != targets.size:
        raise ValueError(
            "Features must be a (samples, components) matrix matching targets.\n"
            f"| Got: features {features.shape}, targets {targets.shape}"
        )
    if targets.size == 0:
        raise EmptyClassError("No training samples.")
    if not (np.all(np.isfinite(features)) and np.all(np.isfinite(targets))):
        raise ValueError("Training features and targets must be finite.")
    if epsilon < 0 or C <= 0 or bias_scale <= 0:
        raise ValueError(
            "Need epsilon >= 0, C > 0 and bias_scale > 0.\n"
            f"| Got: epsilon={epsilon} C={C} bias_scale={bias_scale}"
        )

    n_samples = features.shape[0]
    augmented = np.hstack([features, np.full((n_samples, 1), float(bias_scale))])
    diagonal = np.einsum("ij,ij->i", augmented, augmented)
    beta = np.zeros(n_samples)
    w = np.zeros(augmented.shape[1])
    rng = np.random.default_rng(seed)

    history: List[float] = []
    primal = _primal_objective(augmented, targets, w, epsilon, C)
    relative_gap = float("inf")
    passes = 0
    for passes in range(1, max_passes + 1):
        for i in rng.permutation(n_samples):
            q = diagonal[i]
            if q <= 0:
                continue
            row = augmented[i]
            gradient = w @ row - targets[i]
            old = beta[i]
            positive_step = old - (gradient + epsilon) / q
            negative_step = old - (gradient - epsilon) / q
            if positive_step > 0:
                new = positive_step
            elif negative_step < 0:
                new = negative_step
            else:
                new = 0.0
            new = min(max(new, -C), C)
            if new != old:
                w += (new - old) * row
                beta[i] = new
        dual = float(0.5 * w @ w - targets @ beta + epsilon * np.abs(beta).sum())
        history.append(dual)
        primal = _primal_objective(augmented, targets, w, epsilon, C)
        relative_gap = (primal + dual) / max(abs(primal), 1e-12)
        if relative_gap < tol:
            break

    converged = relative_gap < tol
    meta = TrainingMeta(
        n_positive=int(np.sum(targets > 0)),
        n_negative=int(np.sum(targets < 0)),
        seed=seed,
        objective=primal,
        passes=passes,
        relative_gap=float(relative_gap),
        converged=bool(converged),
        dual_history=tuple(history),
    )
    log = logger.info if converged else logger.warning
    log(
        "SVR solver %s after %d passes (objective %.6g, relative gap %.2e)",
        "converged" if converged else "stopped",
        passes,
        primal,
        relative_gap,
    )
    return w[:-1].copy(), float(w[-1] * bias_scale), meta


def train_svr(
    samples: SampleSet,
    epsilon: float = SVR_EPSILON,
    C: float = SVR_C,
    seed: int = 0,
    bias_scale: float = SVR_BIAS_SCALE,
    tol: float = SVR_TOL,
    max_passes: int = SVR_MAX_PASSES,
) -> SvrModel:
    """
    Train a model on +1 (positive) / -1 (negative) sample targets.

    :raises EmptyClassError: one of the classes has no samples.
    """
    if len(samples.positives) == 0 or len(samples.negatives) == 0:
        raise EmptyClassError(
            "Training needs both classes.\n"
            f"| Got: {len(samples.positives)} positive, "
            f"{len(samples.negatives)} negative"
        )
    features, targets = samples.matrix()
    weights, bias, meta = fit_linear_svr(
        features, targets, epsilon, C, seed, bias_scale, tol, max_passes
    )
    return SvrModel(weights, bias, epsilon, C, bias_scale, samples.layout, meta)


def score(model: SvrModel, descriptor: Union[HogDescriptor, np.ndarray]) -> float:
    """Decision value ``w . d + b``."""
    values = (
        descriptor.values
        if isinstance(descriptor, HogDescriptor)
        else np.asarray(descriptor, dtype=np.float64).ravel()
    )
    if values.size != model.weights.size:
        raise ValueError(
            "Descriptor length does not match the model.\n"
            f"| Expected: {model.weights.size}\n"
            f"| Got: {values.size}"
        )
    return float(model.weights @ values + model.bias)


def pyramid_scales(
    width: int, height: int, layout: HogLayout, scale_factor: float = SCALE_FACTOR
) -> List[float]:
    """
    Downscale ladder ``scale_factor ** k`` of the detection pyramid.

    The ladder holds ``floor(log(r) / log(scale_factor))`` levels, ``r``
    being the smaller of the image-to-window side ratios, and at least the
    base level.
    """
    if scale_factor <= 1:
        raise ValueError(f"scale_factor must be > 1, got {scale_factor}")
    ratio = min(width / layout.window_width, height / layout.window_height)
    if ratio < 1:
        raise ValueError(
            "Image is smaller than the detection window.\n"
            f"| Window: {layout.window_width}x{layout.window_height}\n"
            f"| Got: {width}x{height}"
        )
    levels = max(1, int(math.floor(math.log(ratio) / math.log(scale_factor))))
    return [scale_factor**k for k in range(levels)]


def _detect_level(
    img: Raster,
    scale: float,
    weights: np.ndarray,
    model: SvrModel,
    layout: HogLayout,
    hit_threshold: float,
    stride: int,
    upscale_factor: int,
    source: str,
) -> List[DetectionBox]:
    level_width = int(round(img.width / scale))
    level_height = int(round(img.height / scale))
    if level_width < layout.window_width or level_height < layout.window_height:
        return []
    level = resize(img, level_width, level_height)
    blocks = hog_block_grid(level.values, layout)
    windows_y = blocks.shape[0] - layout.blocks_y + 1
    windows_x = blocks.shape[1] - layout.blocks_x + 1
    if windows_y < 1 or windows_x < 1:
        return []
    scores = np.full((windows_y, windows_x), model.bias)
    for j in range(layout.blocks_y):
        for i in range(layout.blocks_x):
            scores += blocks[j : j + windows_y, i : i + windows_x] @ weights[j, i]
    step = stride // layout.block_stride
    scores = scores[::step, ::step]

    scale_x = img.width / level_width
    scale_y = img.height / level_height
    frame_width = img.width / upscale_factor
    frame_height = img.height / upscale_factor
    hits = []
    for row, col in zip(*np.nonzero(scores >= hit_threshold)):
        x = col * stride * scale_x / upscale_factor
        y = row * stride * scale_y / upscale_factor
        width = layout.window_width * scale_x / upscale_factor
        height = layout.window_height * scale_y / upscale_factor
        x1 = min(x + width, frame_width)
        y1 = min(y + height, frame_height)
        hits.append(
            DetectionBox(x, y, x1 - x, y1 - y, float(scores[row, col]), source)
        )
    return hits


def detect_multiscale(
    img: Raster,
    model: SvrModel,
    layout: Optional[HogLayout] = None,
    scale_factor: float = SCALE_FACTOR,
    hit_threshold: float = HIT_THRESHOLD,
    stride: int = DETECTION_STRIDE,
    upscale_factor: int = UPSCALE_FACTOR,
    source: str = "after",
    min_votes: int = GROUP_MIN_VOTES,
    group_iou: float = GROUP_IOU,
    group: bool = True,
    max_levels: Optional[int] = None,
    workers: int = 1,
) -> List[DetectionBox]:
    """
    Slide the model's window over a pyramid of an enlarged raster.

    ``img`` must already be enlarged ``upscale_factor`` times; returned boxes
    are in the coordinates of the original, not enlarged, raster. Levels are
    scanned in ladder order and raw hits grouped with
    :py:func:`group_detections` unless ``group`` is False.
    """
    layout = layout or model.layout
    if not model.weights.size == layout.descriptor_length:
        raise ValueError(
            "Model does not match the HOG layout.\n"
            f"| Expected: {layout.descriptor_length} weights\n"
            f"| Got: {model.weights.size}"
        )
    if stride <= 0 or stride % layout.block_stride:
        raise ValueError(
            "Detection stride must be a multiple of the block stride.\n"
            f"| Got: {stride}"
        )
    scales = pyramid_scales(img.width, img.height, layout, scale_factor)
    if max_levels is not None:
        scales = scales[:max_levels]
    weights = model.weights.reshape(
        layout.blocks_y, layout.blocks_x, layout.block_length
    )

    def run(scale: float) -> List[DetectionBox]:
        return _detect_level(
            img,
            scale,
            weights,
            model,
            layout,
            hit_threshold,
            stride,
            upscale_factor,
            source,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_level = list(pool.map(run, scales))
    else:
        per_level = [run(scale) for scale in scales]
    raw = [box for boxes in per_level for box in boxes]
    logger.debug("%d raw %s hits over %d levels", len(raw), source, len(scales))
    if not group:
        return raw
    return group_detections(raw, min_votes, group_iou)


def _iou_matrix(boxes: np.ndarray) -> np.ndarray:
    x0, y0 = boxes[:, 0], boxes[:, 1]
    x1, y1 = x0 + boxes[:, 2], y0 + boxes[:, 3]
    inter_w = np.clip(
        np.minimum(x1[:, None], x1[None, :]) - np.maximum(x0[:, None], x0[None, :]),
        0,
        None,
    )
    inter_h = np.clip(
        np.minimum(y1[:, None], y1[None, :]) - np.maximum(y0[:, None], y0[None, :]),
        0,
        None,
    )
    inter = inter_w * inter_h
    area = boxes[:, 2] * boxes[:, 3]
    union = area[:, None] + area[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def group_detections(
    raw: Sequence[DetectionBox],
    min_votes: int = GROUP_MIN_VOTES,
    iou_threshold: float = GROUP_IOU,
) -> List[DetectionBox]:
    """
    Merge overlapping raw hits.

    Greedy clustering: the best-scoring unassigned box seeds a cluster and
    takes every unassigned box whose IoU with the seed is >= ``iou_threshold``.
    Clusters with fewer than ``min_votes`` members are dropped. A cluster is
    replaced by the score-weighted mean box carrying the best member score.
    """
    if not raw:
        return []
    boxes = np.array([box.box for box in raw], dtype=np.float64)
    overlaps = _iou_matrix(boxes) >= iou_threshold
    np.fill_diagonal(overlaps, True)
    order = np.argsort([-box.score for box in raw], kind="stable")
    unassigned = np.ones(len(raw), dtype=bool)
    grouped = []
    for seed in order:
        if not unassigned[seed]:
            continue
        members = np.flatnonzero(unassigned & overlaps[seed])
        unassigned[members] = False
        if members.size < min_votes:
            continue
        scores = np.array([raw[i].score for i in members])
        weights = scores if scores.sum() > 0 and np.all(scores >= 0) else None
        x, y, width, height = np.average(boxes[members], axis=0, weights=weights)
        best = members[int(np.argmax(scores))]
        grouped.append(
            DetectionBox(
                float(x),
                float(y),
                float(width),
                float(height),
                float(scores.max()),
                raw[best].source,
            )
        )
    grouped.sort(key=lambda box: (-box.score, box.y, box.x))
    return grouped
