"""
End-to-end change detection runs and model training.

A run co-registers the pair, builds the difference image and then, tile by
tile, scans the enlarged 'before', 'after' and difference tiles with the
detector models, runs the blob chain and fuses both into final blocks.
"""

__all__ = [
    "PairManifest",
    "TrainingManifest",
    "RunRecord",
    "TileOutcome",
    "run_pipeline",
    "coregister_images",
    "train_model_pair",
    "train_models",
    "evaluate_blocks",
    "write_scene",
]

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import builders, parsers
from ._version import __version__
from .blob import BlobResult, BlockCandidate, Region, run_blob_chain
from .config import (
    DetectionConfig,
    EvaluationConfig,
    GroupingConfig,
    PairManifest,
    SvrConfig,
    TrainingManifest,
)
from .coregister import (
    RegistrationConfig,
    Tile,
    TileAlignment,
    TileStatus,
    assemble_aligned,
    coregister_pair,
    tile_grid,
)
from .evaluation import (
    GroundTruthBlock,
    MetricsReport,
    compute_rates,
    format_table,
    match_detections,
)
from .exceptions import DimensionMismatchError, ModelFormatError
from .fusion import FinalBlock, fuse
from .hog import AnnotationBox, HogLayout, extract_samples
from .raster import Raster, difference_image, upscale
from .svm import DetectionBox, SvrModel, detect_multiscale, train_svr
from .synthgen import SyntheticScene

logger = logging.getLogger(__name__)

STAGES = (
    "tiles",
    "tiles_aligned",
    "boxes_before",
    "boxes_after",
    "boxes_difference",
    "bright_regions",
    "dark_regions",
    "blob_candidates",
    "final_blocks",
)


@dataclass
class RunRecord:
    """Log of one run, written next to its outputs."""

    manifest: PairManifest
    version: str = __version__
    alignments: List[TileAlignment] = field(default_factory=list)
    counts: Dict[str, int] = field(default_factory=lambda: dict.fromkeys(STAGES, 0))
    timings: Dict[str, float] = field(default_factory=dict)
    failures: List[str] = field(default_factory=list)
    outputs: Dict[str, str] = field(default_factory=dict)
    metrics: Optional[MetricsReport] = None

    def to_dict(self) -> dict:
        record = {
            "version": self.version,
            "manifest": builders.to_plain(self.manifest),
            "counts": dict(self.counts),
            "timings": {key: round(value, 3) for key, value in self.timings.items()},
            "failures": list(self.failures),
            "alignments": [alignment.to_csv_row() for alignment in self.alignments],
            "outputs": dict(self.outputs),
        }
        if self.metrics is not None:
            record["metrics"] = {
                name: row.to_csv_row() for name, row in self.metrics.rows.items()
            }
        return record


@dataclass(eq=False)
class TileOutcome:
    """Products of one tile, in full-frame coordinates."""

    tile: Tile
    boxes_before: List[DetectionBox] = field(default_factory=list)
    boxes_after: List[DetectionBox] = field(default_factory=list)
    boxes_diff: List[DetectionBox] = field(default_factory=list)
    blobs: Optional[BlobResult] = None
    candidates: List[BlockCandidate] = field(default_factory=list)
    blocks: List[FinalBlock] = field(default_factory=list)
    error: Optional[str] = None


class _Stopwatch:
    def __init__(self, timings: Dict[str, float], stage: str):
        self.timings = timings
        self.stage = stage

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc_info):
        self.timings[self.stage] = time.perf_counter() - self.start


def _offset_region(region: Optional[Region], x: int, y: int) -> Optional[Region]:
    if region is None:
        return None
    return Region(region.rows + y, region.cols + x, region.polarity, region.detectors)


def _offset_candidate(candidate: BlockCandidate, x: int, y: int) -> BlockCandidate:
    return BlockCandidate(
        _offset_region(candidate.block, x, y),  # type: ignore[arg-type]
        _offset_region(candidate.shadow, x, y),
        candidate.pair_angle_deg,
    )


def _offset_box(
    box: DetectionBox, x: int, y: int, flagged: bool = False
) -> DetectionBox:
    return replace(
        box, x=box.x + x, y=box.y + y, low_confidence_registration=flagged
    )


def _detect(
    tile_raster: Raster,
    model: SvrModel,
    source: str,
    detection: DetectionConfig,
    grouping: GroupingConfig,
) -> List[DetectionBox]:
    return detect_multiscale(
        upscale(tile_raster, detection.upscale_factor),
        model,
        scale_factor=detection.scale_factor,
        hit_threshold=detection.hit_threshold,
        stride=detection.stride,
        upscale_factor=detection.upscale_factor,
        source=source,
        min_votes=grouping.min_votes,
        group_iou=grouping.iou,
        max_levels=detection.max_levels,
    )


def _process_tile(
    tile: Tile,
    before: Raster,
    after: Raster,
    diff: Raster,
    models: Tuple[SvrModel, SvrModel],
    manifest: PairManifest,
    alignment: Optional[TileAlignment],
) -> TileOutcome:
    outcome = TileOutcome(tile)
    confidence = float("nan") if alignment is None else alignment.correlation
    flagged = alignment is not None and alignment.low_confidence
    after_model, diff_model = models
    crops = [
        image.crop(tile.x, tile.y, tile.width, tile.height)
        for image in (before, after, diff)
    ]
    before_tile, after_tile, diff_tile = crops
    try:
        detection, grouping = manifest.detection, manifest.grouping
        boxes = [
            _detect(before_tile, after_model, "before", detection, grouping),
            _detect(after_tile, after_model, "after", detection, grouping),
            _detect(diff_tile, diff_model, "difference", detection, grouping),
        ]
        outcome.boxes_before, outcome.boxes_after, outcome.boxes_diff = [
            [_offset_box(box, tile.x, tile.y, flagged) for box in found]
            for found in boxes
        ]
        outcome.blobs = run_blob_chain(
            diff_tile, after_tile, manifest.sun, manifest.blob
        )
        outcome.candidates = [
            _offset_candidate(candidate, tile.x, tile.y)
            for candidate in outcome.blobs.final
        ]
        outcome.blocks = fuse(
            outcome.candidates,
            outcome.boxes_before,
            outcome.boxes_after,
            outcome.boxes_diff,
            pixel_scale=manifest.pixel_scale,
            tile=tile.index,
            registration_confidence=confidence,
            low_confidence_registration=flagged,
        )
    except (ValueError, RuntimeError) as error:
        logger.warning("Tile %d failed: %s", tile.index, error)
        outcome.error = f"tile {tile.index}: {error}"
    return outcome


def _load_inputs(manifest: PairManifest) -> Tuple[Raster, Raster, SvrModel, SvrModel]:
    after_model = parsers.read_model(manifest.models.after)
    diff_model = parsers.read_model(manifest.models.difference)
    if manifest.hog is not None:
        for name, model in (("after", after_model), ("difference", diff_model)):
            if model.layout != manifest.hog:
                raise ModelFormatError(
                    f"The {name} model does not use the manifest window layout.\n"
                    f"| Expected: {manifest.hog}\n"
                    f"| Got: {model.layout}"
                )
    before = parsers.read_raster(manifest.before, manifest.pixel_scale)
    after = parsers.read_raster(manifest.after, manifest.pixel_scale)
    if before.shape != after.shape:
        raise DimensionMismatchError(
            "Before and after images must share dimensions.\n"
            f"| Expected: {after.width}x{after.height}\n"
            f"| Got: {before.width}x{before.height}"
        )
    return before, after, after_model, diff_model


def _registration_config(manifest: PairManifest) -> RegistrationConfig:
    return replace(manifest.registration, tile_size=manifest.tile_size)


def _coregister(
    before: Raster, after: Raster, manifest: PairManifest
) -> Tuple[Raster, List[TileAlignment]]:
    config = _registration_config(manifest)
    if not manifest.stages.coregister:
        grid = tile_grid(after.width, after.height, config.tile_size)
        skipped = [TileAlignment(tile, status=TileStatus.SKIPPED) for tile in grid]
        return before, skipped
    pairs = coregister_pair(before, after, config, manifest.workers)
    aligned_before, _ = assemble_aligned(pairs, after.width, after.height)
    return aligned_before, [pair.alignment for pair in pairs]


def _frame_labels(
    shape: Tuple[int, int], regions: Sequence[Optional[Region]]
) -> np.ndarray:
    labels = np.zeros(shape, dtype=np.int32)
    for index, region in enumerate(regions, start=1):
        if region is not None:
            labels[region.rows, region.cols] = index
    return labels


def _write_debug(
    output_dir: Path,
    aligned_before: Raster,
    diff: Raster,
    outcomes: Sequence[TileOutcome],
    record: RunRecord,
) -> None:
    shape = diff.shape
    bright = np.zeros(shape, dtype=bool)
    dark = np.zeros(shape, dtype=bool)
    edges = np.zeros(shape, dtype=bool)
    candidates: List[BlockCandidate] = []
    for outcome in outcomes:
        if outcome.blobs is None:
            continue
        tile = outcome.tile
        window = (
            slice(tile.y, tile.y + tile.height),
            slice(tile.x, tile.x + tile.width),
        )
        bright[window] = outcome.blobs.bright_mask
        dark[window] = outcome.blobs.dark_mask
        edges[window] = outcome.blobs.edges
        candidates.extend(outcome.candidates)
    debug_dir = output_dir / "debug"
    artifacts = {
        "aligned_before": builders.write_raster(
            aligned_before, debug_dir / "aligned_before.png"
        ),
        "difference": builders.write_raster(diff, debug_dir / "difference.png"),
        "bright_mask": builders.write_mask(bright, debug_dir / "bright_mask.png"),
        "dark_mask": builders.write_mask(dark, debug_dir / "dark_mask.png"),
        "edges": builders.write_mask(edges, debug_dir / "edges.png"),
        "candidate_blocks": builders.write_label_image(
            _frame_labels(shape, [c.block for c in candidates]),
            debug_dir / "candidate_blocks.png",
        ),
        "candidate_shadows": builders.write_label_image(
            _frame_labels(shape, [c.shadow for c in candidates]),
            debug_dir / "candidate_shadows.png",
        ),
    }
    record.outputs.update({key: str(path) for key, path in artifacts.items()})


def run_pipeline(
    manifest: PairManifest, debug_artifacts: Optional[bool] = None
) -> RunRecord:
    """
    Detect new blocks in the manifest's image pair and export the results.

    Inputs are validated before anything is written. Tiles are processed on
    ``manifest.workers`` threads and gathered by tile index; a failing tile
    is logged and recorded while the run goes on.

    :raises ModelFormatError: a model file is unreadable or its window layout
        differs from the manifest `hog` section.
    :raises ValueError: an image is unreadable or the pair sizes differ.
    """
    debug = manifest.debug_artifacts if debug_artifacts is None else debug_artifacts
    record = RunRecord(manifest)
    with _Stopwatch(record.timings, "load"):
        before, after, after_model, diff_model = _load_inputs(manifest)

    with _Stopwatch(record.timings, "coregister"):
        aligned_before, record.alignments = _coregister(before, after, manifest)
    with _Stopwatch(record.timings, "difference"):
        diff = difference_image(aligned_before, after)

    alignments = {alignment.tile.index: alignment for alignment in record.alignments}
    grid = tile_grid(after.width, after.height, manifest.tile_size)
    models = (after_model, diff_model)

    def process(tile: Tile) -> TileOutcome:
        return _process_tile(
            tile,
            aligned_before,
            after,
            diff,
            models,
            manifest,
            alignments.get(tile.index),
        )

    with _Stopwatch(record.timings, "tiles"):
        if manifest.workers > 1:
            with ThreadPoolExecutor(max_workers=manifest.workers) as pool:
                outcomes = list(pool.map(process, grid))
        else:
            outcomes = [process(tile) for tile in grid]

    blocks = [
        replace(block, id=index)
        for index, block in enumerate(
            (block for outcome in outcomes for block in outcome.blocks), start=1
        )
    ]
    counts = record.counts
    counts["tiles"] = len(grid)
    counts["tiles_aligned"] = sum(
        alignment.status == TileStatus.OK for alignment in record.alignments
    )
    for outcome in outcomes:
        counts["boxes_before"] += len(outcome.boxes_before)
        counts["boxes_after"] += len(outcome.boxes_after)
        counts["boxes_difference"] += len(outcome.boxes_diff)
        if outcome.blobs is not None:
            counts["bright_regions"] += len(outcome.blobs.bright)
            counts["dark_regions"] += len(outcome.blobs.dark)
        counts["blob_candidates"] += len(outcome.candidates)
        if outcome.error:
            record.failures.append(outcome.error)
    counts["final_blocks"] = len(blocks)
    logger.info(
        "Run finished: %s",
        ", ".join(f"{stage} {counts[stage]}" for stage in STAGES),
    )

    with _Stopwatch(record.timings, "export"):
        _export(manifest, record, aligned_before, after, diff, outcomes, blocks, debug)
    return record


def _export(
    manifest: PairManifest,
    record: RunRecord,
    aligned_before: Raster,
    after: Raster,
    diff: Raster,
    outcomes: Sequence[TileOutcome],
    blocks: Sequence[FinalBlock],
    debug: bool,
) -> None:
    output_dir = manifest.output_dir
    output_dir.mkdir(parents=True, exist_ok=True)
    tables = {
        "final_blocks": (blocks, FinalBlock),
        "detections_before": (
            [box for outcome in outcomes for box in outcome.boxes_before],
            DetectionBox,
        ),
        "detections_after": (
            [box for outcome in outcomes for box in outcome.boxes_after],
            DetectionBox,
        ),
        "detections_difference": (
            [box for outcome in outcomes for box in outcome.boxes_diff],
            DetectionBox,
        ),
        "alignment_log": (record.alignments, TileAlignment),
    }
    for name, (records, record_type) in tables.items():
        path = builders.write_csv(records, output_dir / f"{name}.csv", record_type)
        record.outputs[name] = str(path)
    labels = _frame_labels(after.shape, [block.shape for block in blocks])
    record.outputs["final_labels"] = str(
        builders.write_label_image(labels, output_dir / "final_labels.png")
    )
    if manifest.fusion.overlay:
        record.outputs["overlay"] = str(
            builders.write_overlay(after, blocks, output_dir / "overlay.png")
        )
    if debug:
        _write_debug(output_dir, aligned_before, diff, outcomes, record)
    truth_path = manifest.evaluation.truth
    if truth_path is not None:
        truth = parsers.parse_ground_truth(truth_path)
        record.metrics = _score(
            truth, blocks, manifest.pixel_scale, manifest.evaluation
        )
        _write_metrics(record.metrics, output_dir, manifest.evaluation, record.outputs)
    record.outputs["run_record"] = str(output_dir / "run_record.yaml")
    builders.write_yaml(record.to_dict(), output_dir / "run_record.yaml")


def _score(
    truth: Sequence[GroundTruthBlock],
    blocks: Sequence[FinalBlock],
    pixel_scale: float,
    config: EvaluationConfig,
    region: str = "run",
) -> MetricsReport:
    matches = match_detections(truth, blocks, config.match_iou)
    return compute_rates(
        matches, truth, blocks, pixel_scale, config.size_split_m2, region
    )


def _write_metrics(
    report: MetricsReport,
    output_dir: Path,
    config: EvaluationConfig,
    outputs: Dict[str, str],
) -> None:
    path = builders.write_csv(report.rows.values(), output_dir / "metrics.csv")
    outputs["metrics"] = str(path)
    table = output_dir / "metrics.txt"
    table.write_text(
        format_table([report], size_split_m2=config.size_split_m2), encoding="utf-8"
    )
    outputs["metrics_table"] = str(table)


def evaluate_blocks(
    blocks_path: Path,
    truth_path: Path,
    pixel_scale: float,
    config: Optional[EvaluationConfig] = None,
    output_dir: Optional[Path] = None,
    region: str = "",
) -> MetricsReport:
    """Score a final-block CSV against truth boxes or a label PNG."""
    config = config or EvaluationConfig()
    blocks = parsers.parse_final_blocks(blocks_path)
    truth = parsers.parse_ground_truth(truth_path)
    region = region or Path(blocks_path).stem
    report = _score(truth, blocks, pixel_scale, config, region)
    if output_dir is not None:
        _write_metrics(report, Path(output_dir), config, {})
    return report


def coregister_images(
    before_path: Path,
    after_path: Path,
    output_dir: Path,
    config: Optional[RegistrationConfig] = None,
    pixel_scale: float = 0.25,
    workers: int = 1,
) -> List[TileAlignment]:
    """Align 'before' onto 'after'; write the aligned image and the log."""
    before = parsers.read_raster(before_path, pixel_scale)
    after = parsers.read_raster(after_path, pixel_scale)
    config = config or RegistrationConfig()
    pairs = coregister_pair(before, after, config, workers)
    aligned_before, _ = assemble_aligned(pairs, after.width, after.height)
    output_dir = Path(output_dir)
    builders.write_raster(aligned_before, output_dir / "aligned_before.png")
    alignments = [pair.alignment for pair in pairs]
    builders.write_csv(alignments, output_dir / "alignment_log.csv", TileAlignment)
    return alignments


def train_model_pair(
    after: Raster,
    diff: Raster,
    after_annotations,
    diff_annotations,
    svr: Optional[SvrConfig] = None,
    layout: Optional[HogLayout] = None,
    exclusion: Optional[np.ndarray] = None,
    negative_stride: int = 32,
) -> Tuple[SvrModel, SvrModel]:
    """
    Train the 'after' and difference models.

    Windows touching ``exclusion`` are left out of both sample sets.

    :raises EmptyClassError: a sample set lacks positives or negatives.
    """
    svr = svr or SvrConfig()
    layout = layout or HogLayout()
    for name, image in (("difference", diff), ("exclusion", exclusion)):
        if image is not None and np.shape(image) != after.shape:
            raise DimensionMismatchError(
                f"The {name} image must match the 'after' image.\n"
                f"| Expected: {after.shape}\n"
                f"| Got: {np.shape(image)}"
            )
    models = []
    for source, image, annotations in (
        ("after", after, after_annotations),
        ("difference", diff, diff_annotations),
    ):
        samples = extract_samples(
            image, annotations, layout, source, exclusion, negative_stride
        )
        models.append(
            train_svr(
                samples,
                epsilon=svr.epsilon,
                C=svr.C,
                seed=svr.seed,
                bias_scale=svr.bias_scale,
                tol=svr.tol,
                max_passes=svr.max_passes,
            )
        )
    return models[0], models[1]


def train_models(manifest: TrainingManifest) -> Tuple[SvrModel, SvrModel]:
    """Train both models from a training manifest and write them."""
    after = parsers.read_raster(manifest.after_image, manifest.pixel_scale)
    if manifest.difference_image is not None:
        diff = parsers.read_raster(manifest.difference_image, manifest.pixel_scale)
    else:
        assert manifest.before_image is not None
        before = parsers.read_raster(manifest.before_image, manifest.pixel_scale)
        diff = difference_image(before, after)
    exclusion = None
    if manifest.exclusion_mask is not None:
        exclusion = parsers.read_mask(manifest.exclusion_mask)
    after_model, diff_model = train_model_pair(
        after,
        diff,
        parsers.parse_annotations(manifest.after_annotations),
        parsers.parse_annotations(manifest.difference_annotations),
        manifest.svr,
        manifest.hog,
        exclusion,
        manifest.negative_stride,
    )
    builders.write_model(after_model, manifest.output.after)
    builders.write_model(diff_model, manifest.output.difference)
    logger.info(
        "Wrote models to %s and %s", manifest.output.after, manifest.output.difference
    )
    return after_model, diff_model


def write_scene(scene: SyntheticScene, output_dir: Path) -> Dict[str, Path]:
    """
    Save a synthetic scene: images, truth, training annotations and its spec.
    """
    output_dir = Path(output_dir)
    annotations = scene.training_annotations()
    return {
        "before": builders.write_raster(scene.before, output_dir / "before.png"),
        "after": builders.write_raster(scene.after, output_dir / "after.png"),
        "truth": builders.write_csv(
            scene.truth, output_dir / "truth.csv", GroundTruthBlock
        ),
        "truth_labels": builders.write_label_image(
            scene.labels, output_dir / "truth_labels.png"
        ),
        "annotations": builders.write_csv(
            annotations, output_dir / "annotations.csv", AnnotationBox
        ),
        "spec": builders.write_yaml(scene.spec, output_dir / "scene.yaml"),
    }
