"""Reading of rasters, CSV tables, manifests and model files."""

__all__ = [
    "read_raster",
    "read_mask",
    "read_label_image",
    "truth_from_labels",
    "parse_csv",
    "parse_annotations",
    "parse_detections",
    "parse_ground_truth",
    "parse_final_blocks",
    "parse_alignment_log",
    "build_section",
    "parse_manifest",
    "parse_training_manifest",
    "parse_scene_spec",
    "read_model",
    "read_sample_set",
]

import csv
import struct
import typing
from dataclasses import fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Generic, List, Mapping, Type, TypeVar, Union

import numpy as np
import yaml
from PIL import Image, UnidentifiedImageError
from scipy import ndimage as ndi

from .base import CSVAble
from .config import PairManifest, TrainingManifest
from .constants import PIXEL_SCALE
from .coregister import TileAlignment
from .evaluation import GroundTruthBlock
from .exceptions import ManifestError, ModelFormatError
from .fusion import FinalBlock
from .hog import AnnotationBox, HogLayout, SampleSet
from .raster import Raster
from .svm import DetectionBox, SvrModel, TrainingMeta
from .synthgen import SceneSpec

PathLike = Union[str, Path]
T = TypeVar("T", bound=CSVAble)

MODEL_MAGIC = b"BFSVR\x00\x00\x00"
SAMPLES_MAGIC = b"BFHOG\x00\x00\x00"
FORMAT_VERSION = 1


def _open_image(path: PathLike) -> Image.Image:
    try:
        image = Image.open(path)
        image.load()
    except (OSError, UnidentifiedImageError) as error:
        raise ValueError(f"Cannot read image `{path}`: {error}") from error
    return image


def read_raster(path: PathLike, pixel_scale: float = PIXEL_SCALE) -> Raster:
    """Load an 8-bit grayscale PGM or PNG."""
    image = _open_image(path)
    if image.mode != "L":
        image = image.convert("L")
    return Raster(np.asarray(image, dtype=np.float64), pixel_scale)


def read_mask(path: PathLike) -> np.ndarray:
    """Nonzero pixels of an image as a boolean mask."""
    return np.asarray(_open_image(path)) != 0


def read_label_image(path: PathLike) -> np.ndarray:
    """Integer labels of an 8- or 16-bit PNG; 0 is background."""
    image = _open_image(path)
    if image.mode not in ("L", "I", "I;16"):
        raise ValueError(
            "Label image must be single channel.\n"
            f"| Expected: L, I or I;16\n"
            f"| Got: {image.mode}"
        )
    return np.asarray(image).astype(np.int64)


def truth_from_labels(labels: np.ndarray) -> List[GroundTruthBlock]:
    """One truth block per nonzero label, id taken from the label."""
    truth = []
    for index, window in enumerate(ndi.find_objects(labels), start=1):
        if window is None:
            continue
        rows, cols = np.nonzero(labels[window] == index)
        rows = rows + window[0].start
        cols = cols + window[1].start
        truth.append(
            GroundTruthBlock(
                id=index,
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
    return truth


class CSVParser(Generic[T]):
    """Rows of a CSV table parsed into one record type."""

    def __init__(self, record_type: Type[T], required: typing.Sequence[str] = ()):
        self.record_type = record_type
        self.required = tuple(required) or record_type.csv_header

    def check_header(self, header: typing.Optional[typing.Sequence[str]]) -> None:
        missing = [name for name in self.required if name not in (header or ())]
        if missing:
            raise TypeError(
                f"CSV table lacks columns for {self.record_type.__name__}.\n"
                f"| Expected: {', '.join(self.required)}\n"
                f"| Missing: {', '.join(missing)}"
            )

    def parse(self, path: PathLike) -> List[T]:
        with open(path, newline="", encoding="utf-8") as stream:
            reader = csv.DictReader(stream)
            self.check_header(reader.fieldnames)
            records = []
            for line, row in enumerate(reader, start=2):
                try:
                    records.append(self.record_type.parse_from_csv_row(row))
                except (KeyError, ValueError) as error:
                    raise ValueError(f"{path}:{line}: {error}") from error
        return records


def parse_csv(path: PathLike, record_type: Type[T]) -> List[T]:
    return CSVParser(record_type).parse(path)


def parse_annotations(path: PathLike) -> List[AnnotationBox]:
    return CSVParser(AnnotationBox).parse(path)


def parse_detections(path: PathLike) -> List[DetectionBox]:
    return CSVParser(DetectionBox, ("x", "y", "w", "h", "score")).parse(path)


def parse_ground_truth(path: PathLike) -> List[GroundTruthBlock]:
    """Truth from a CSV of boxes or from a labelled PNG."""
    if Path(path).suffix.lower() == ".png":
        return truth_from_labels(read_label_image(path))
    return CSVParser(GroundTruthBlock, ("id", "x", "y", "w", "h")).parse(path)


def parse_final_blocks(path: PathLike) -> List[FinalBlock]:
    required = ("id", "centroid_x", "centroid_y", "x", "y", "w", "h", "area_px")
    return CSVParser(FinalBlock, required + ("has_shadow",)).parse(path)


def parse_alignment_log(path: PathLike) -> List[TileAlignment]:
    return CSVParser(TileAlignment).parse(path)


def _resolve(value: Any, base_dir: Path) -> Path:
    path = Path(value).expanduser()
    return path if path.is_absolute() else (base_dir / path).resolve()


def _unwrap_optional(hint: Any) -> Any:
    if typing.get_origin(hint) is Union:
        args = [arg for arg in typing.get_args(hint) if arg is not type(None)]
        if len(args) == 1:
            return args[0]
    return hint


def build_section(cls: Type, data: Any, section: str, base_dir: Path = Path(".")):
    """
    Instantiate a config dataclass from a mapping.

    Nested dataclass fields are built recursively, sequences become tuples
    where the field is a tuple and paths are resolved against ``base_dir``.

    :raises TypeError: the section is not a mapping or has unknown keys.
    """
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise TypeError(
            f"Section `{section}` must be a mapping.\n| Got: {type(data).__name__}"
        )
    hints = typing.get_type_hints(cls)
    known = [f.name for f in fields(cls) if f.init]
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise TypeError(
            f"Unknown keys in `{section}`.\n"
            f"| Expected: {', '.join(known)}\n"
            f"| Got: {', '.join(map(str, unknown))}"
        )
    kwargs: Dict[str, Any] = {}
    for key, value in data.items():
        hint = _unwrap_optional(hints[key])
        if value is None:
            kwargs[key] = None
        elif is_dataclass(hint):
            kwargs[key] = build_section(hint, value, f"{section}.{key}", base_dir)
        elif hint is Path:
            kwargs[key] = _resolve(value, base_dir)
        elif typing.get_origin(hint) is tuple:
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as error:
        raise TypeError(f"Section `{section}`: {error}") from error


def _load_yaml(path: PathLike) -> Dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as stream:
            data = yaml.safe_load(stream)
    except OSError as error:
        raise ManifestError(f"Cannot read manifest `{path}`: {error}") from error
    except yaml.YAMLError as error:
        raise ManifestError(f"Manifest `{path}` is not valid YAML: {error}") from error
    if not isinstance(data, dict):
        raise TypeError(f"Manifest `{path}` must hold a mapping at top level.")
    return data


def _check_required(data: Mapping, required: typing.Sequence[str], path) -> None:
    missing = [key for key in required if key not in data]
    if missing:
        raise TypeError(
            f"Manifest `{path}` misses keys.\n| Missing: {', '.join(missing)}"
        )


def _check_files(paths: Mapping[str, typing.Optional[Path]]) -> None:
    for key, path in paths.items():
        if path is not None and not path.is_file():
            raise ManifestError(f"`{key}` points to a missing file: {path}")


class ManifestParser:
    """YAML manifest of one detection run."""

    required = ("before", "after", "sun", "models", "output_dir")

    def __init__(self, path: PathLike, check_models: bool = True):
        self.path = Path(path)
        self.base_dir = self.path.resolve().parent
        self.check_models = check_models

    def parse(self, overrides: typing.Optional[Mapping[str, Any]] = None):
        data = _load_yaml(self.path)
        data.update(overrides or {})
        _check_required(data, self.required, self.path)
        manifest = build_section(PairManifest, data, "manifest", self.base_dir)
        self.check_inputs(manifest)
        return manifest

    def check_inputs(self, manifest: PairManifest) -> None:
        inputs = {"before": manifest.before, "after": manifest.after}
        if self.check_models:
            inputs.update(
                {
                    "models.after": manifest.models.after,
                    "models.difference": manifest.models.difference,
                }
            )
        inputs["evaluation.truth"] = manifest.evaluation.truth
        _check_files(inputs)


def parse_manifest(
    path: PathLike,
    overrides: typing.Optional[Mapping[str, Any]] = None,
    check_models: bool = True,
) -> PairManifest:
    """
    Load and validate a run manifest.

    :raises ManifestError: a referenced file is missing or the file is not
        valid YAML.
    :raises TypeError: keys are missing or unknown.
    :raises ValueError: a value is out of range.
    """
    return ManifestParser(path, check_models).parse(overrides)


def parse_training_manifest(path: PathLike) -> TrainingManifest:
    data = _load_yaml(path)
    required = ("after_image", "after_annotations", "difference_annotations", "output")
    _check_required(data, required, path)
    base_dir = Path(path).resolve().parent
    manifest = build_section(TrainingManifest, data, "training", base_dir)
    _check_files(
        {
            "after_image": manifest.after_image,
            "before_image": manifest.before_image,
            "difference_image": manifest.difference_image,
            "after_annotations": manifest.after_annotations,
            "difference_annotations": manifest.difference_annotations,
            "exclusion_mask": manifest.exclusion_mask,
        }
    )
    return manifest


def parse_scene_spec(path: PathLike) -> SceneSpec:
    return build_section(SceneSpec, _load_yaml(path), "scene")


class _BinaryReader:
    def __init__(self, payload: bytes, path: PathLike):
        self.payload = payload
        self.offset = 0
        self.path = path

    def unpack(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.payload):
            raise ModelFormatError(f"`{self.path}` is truncated.")
        values = struct.unpack_from(fmt, self.payload, self.offset)
        self.offset += size
        return values

    def array(self, count: int) -> np.ndarray:
        size = 8 * count
        if self.offset + size > len(self.payload):
            raise ModelFormatError(f"`{self.path}` is truncated.")
        values = np.frombuffer(self.payload, "<f8", count, self.offset).copy()
        self.offset += size
        return values

    def check_magic(self, magic: bytes) -> None:
        (found, version) = self.unpack(f"<{len(magic)}sI")
        if found != magic:
            raise ModelFormatError(
                f"`{self.path}` has an unexpected signature.\n"
                f"| Expected: {magic!r}\n"
                f"| Got: {found!r}"
            )
        if version != FORMAT_VERSION:
            raise ModelFormatError(
                f"`{self.path}` has unsupported version.\n"
                f"| Expected: {FORMAT_VERSION}\n"
                f"| Got: {version}"
            )

    def layout(self) -> HogLayout:
        return HogLayout(*self.unpack("<6i"))

    def finish(self) -> None:
        if self.offset != len(self.payload):
            raise ModelFormatError(f"`{self.path}` has trailing data.")


def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as error:
        raise ValueError(f"Cannot read `{path}`: {error}") from error


def read_model(path: PathLike) -> SvrModel:
    """
    Load a model written by :py:func:`~blockfall_lib.builders.write_model`.

    :raises ModelFormatError: bad signature, version or size.
    """
    reader = _BinaryReader(_read_bytes(path), path)
    reader.check_magic(MODEL_MAGIC)
    layout = reader.layout()
    bias, epsilon, C, bias_scale = reader.unpack("<4d")
    n_positive, n_negative, seed, passes = reader.unpack("<4q")
    objective, relative_gap = reader.unpack("<2d")
    (converged, n_history, n_weights) = reader.unpack("<BII")
    history = reader.array(n_history)
    weights = reader.array(n_weights)
    reader.finish()
    if n_weights != layout.descriptor_length:
        raise ModelFormatError(
            f"`{path}` weights do not match its HOG layout.\n"
            f"| Expected: {layout.descriptor_length}\n"
            f"| Got: {n_weights}"
        )
    meta = TrainingMeta(
        n_positive=n_positive,
        n_negative=n_negative,
        seed=seed,
        objective=objective,
        passes=passes,
        relative_gap=relative_gap,
        converged=bool(converged),
        dual_history=tuple(float(value) for value in history),
    )
    return SvrModel(weights, bias, epsilon, C, bias_scale, layout, meta)


def read_sample_set(path: PathLike) -> SampleSet:
    reader = _BinaryReader(_read_bytes(path), path)
    reader.check_magic(SAMPLES_MAGIC)
    layout = reader.layout()
    (source_length,) = reader.unpack("<I")
    (source,) = reader.unpack(f"<{source_length}s")
    n_positive, n_negative = reader.unpack("<2I")
    length = layout.descriptor_length
    positives = reader.array(n_positive * length).reshape(n_positive, length)
    negatives = reader.array(n_negative * length).reshape(n_negative, length)
    reader.finish()
    return SampleSet(positives, negatives, source.decode("utf-8"), layout)

