"""Manifest sections: every tunable of a run, with the reference defaults."""

__all__ = [
    "DetectionConfig",
    "GroupingConfig",
    "SvrConfig",
    "FusionConfig",
    "EvaluationConfig",
    "StageToggles",
    "ModelPaths",
    "PairManifest",
    "TrainingManifest",
]

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .blob import BlobConfig
from .constants import (
    DETECTION_STRIDE,
    GROUP_IOU,
    GROUP_MIN_VOTES,
    HIT_THRESHOLD,
    MATCH_IOU,
    NEGATIVE_STRIDE,
    PIXEL_SCALE,
    SCALE_FACTOR,
    SIZE_SPLIT_M2,
    SVR_BIAS_SCALE,
    SVR_C,
    SVR_EPSILON,
    SVR_MAX_PASSES,
    SVR_TOL,
    TILE_SIZE,
    UPSCALE_FACTOR,
)
from .coregister import RegistrationConfig
from .hog import HogLayout
from .raster import SunGeometry


@dataclass(frozen=True)
class DetectionConfig:
    upscale_factor: int = UPSCALE_FACTOR
    scale_factor: float = SCALE_FACTOR
    hit_threshold: float = HIT_THRESHOLD
    stride: int = DETECTION_STRIDE
    max_levels: Optional[int] = None
    """Cap on pyramid levels; None scans the whole ladder."""

    def __post_init__(self) -> None:
        if self.upscale_factor < 1 or self.scale_factor <= 1 or self.stride <= 0:
            raise ValueError(
                "Detection needs upscale_factor >= 1, scale_factor > 1, stride > 0.\n"
                f"| Got: {self}"
            )


@dataclass(frozen=True)
class GroupingConfig:
    min_votes: int = GROUP_MIN_VOTES
    iou: float = GROUP_IOU

    def __post_init__(self) -> None:
        if self.min_votes < 1 or not 0 < self.iou <= 1:
            raise ValueError(f"Invalid grouping settings: {self}")


@dataclass(frozen=True)
class SvrConfig:
    epsilon: float = SVR_EPSILON
    C: float = SVR_C
    seed: int = 0
    bias_scale: float = SVR_BIAS_SCALE
    max_passes: int = SVR_MAX_PASSES
    tol: float = SVR_TOL


@dataclass(frozen=True)
class FusionConfig:
    overlay: bool = True
    """Render the overlay PNG of accepted blocks."""


@dataclass(frozen=True)
class EvaluationConfig:
    match_iou: float = MATCH_IOU
    size_split_m2: float = SIZE_SPLIT_M2
    truth: Optional[Path] = None
    """Truth CSV or label PNG; the run is scored when set."""


@dataclass(frozen=True)
class StageToggles:
    coregister: bool = True
    """Skip for pairs that are already co-registered."""


@dataclass(frozen=True)
class ModelPaths:
    after: Path
    difference: Path


@dataclass(frozen=True)
class PairManifest:
    """
    Everything a run needs.

    Paths are absolute once parsed; :py:func:`~blockfall_lib.parsers.parse_manifest`
    resolves relative entries against the manifest's directory.
    """

    before: Path
    after: Path
    sun: SunGeometry
    models: ModelPaths
    output_dir: Path
    pixel_scale: float = PIXEL_SCALE
    tile_size: int = TILE_SIZE
    workers: int = 1
    debug_artifacts: bool = False
    stages: StageToggles = field(default_factory=StageToggles)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    hog: Optional[HogLayout] = None
    """Window layout both models must carry; unchecked when unset."""
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    blob: BlobConfig = field(default_factory=BlobConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def __post_init__(self) -> None:
        if not self.pixel_scale > 0:
            raise ValueError(f"pixel_scale must be positive, got {self.pixel_scale}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")


@dataclass(frozen=True)
class TrainingManifest:
    """
    Inputs of the two detector models.

    The difference image is either given or computed from ``before_image``
    and ``after_image``.
    """

    after_image: Path
    after_annotations: Path
    difference_annotations: Path
    output: ModelPaths
    difference_image: Optional[Path] = None
    before_image: Optional[Path] = None
    exclusion_mask: Optional[Path] = None
    pixel_scale: float = PIXEL_SCALE
    negative_stride: int = NEGATIVE_STRIDE
    svr: SvrConfig = field(default_factory=SvrConfig)
    hog: HogLayout = field(default_factory=HogLayout)

    def __post_init__(self) -> None:
        if self.difference_image is None and self.before_image is None:
            raise TypeError(
                "Training manifest needs `difference_image` or `before_image`."
            )
