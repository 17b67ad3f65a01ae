"""Writing of rasters, CSV tables, overlays, YAML records and model files."""

__all__ = [
    "write_raster",
    "write_mask",
    "write_label_image",
    "write_csv",
    "build_overlay",
    "write_overlay",
    "to_plain",
    "write_yaml",
    "build_model",
    "write_model",
    "build_sample_set",
    "write_sample_set",
]

import csv
import enum
import struct
from dataclasses import fields, is_dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Optional, Sequence, Type, Union

import numpy as np
import yaml
from PIL import Image, ImageDraw
from scipy import ndimage as ndi

from .base import CSVAble
from .parsers import FORMAT_VERSION, MODEL_MAGIC, SAMPLES_MAGIC
from .raster import Raster

if TYPE_CHECKING:
    from .fusion import FinalBlock
    from .hog import HogLayout, SampleSet
    from .svm import SvrModel

PathLike = Union[str, Path]

SHADOWED_COLOUR = (255, 40, 40)
SHADOWLESS_COLOUR = (255, 200, 0)


def _prepare(path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_raster(raster: Raster, path: PathLike) -> Path:
    """Save as 8-bit grayscale; the suffix picks PGM or PNG."""
    path = _prepare(path)
    Image.fromarray(raster.to_uint8()).save(path)
    return path


def write_mask(mask: np.ndarray, path: PathLike) -> Path:
    path = _prepare(path)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)
    return path


def write_label_image(labels: np.ndarray, path: PathLike) -> Path:
    """Save labels as a 16-bit PNG."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise ValueError(
            "Labels must fit 16 bits.\n"
            f"| Got range: [{labels.min()}, {labels.max()}]"
        )
    path = _prepare(path)
    Image.fromarray(labels.astype(np.uint16)).save(path)
    return path


def write_csv(
    records: Iterable[CSVAble],
    path: PathLike,
    record_type: Optional[Type[CSVAble]] = None,
) -> Path:
    """
    Write records as CSV with their class header.

    ``record_type`` supplies the header when ``records`` may be empty.
    """
    records = list(records)
    if record_type is None:
        if not records:
            raise ValueError("record_type is required to write an empty table.")
        record_type = type(records[0])
    path = _prepare(path)
    with open(path, "w", newline="", encoding="utf-8") as stream:
        writer = csv.DictWriter(
            stream, fieldnames=record_type.csv_header, lineterminator="\n"
        )
        writer.writeheader()
        for record in records:
            writer.writerow(record.to_csv_row())
    return path


def build_overlay(after: Raster, blocks: Sequence["FinalBlock"]) -> Image.Image:
    """
    Outline accepted blocks on the 'after' image.

    Shadowed blocks are drawn red, shadow-less ones amber. Blocks without a
    shape are drawn as their bounding box.
    """
    rgb = np.repeat(after.to_uint8()[:, :, None], 3, axis=2)
    for block in blocks:
        if block.shape is None:
            continue
        mask = block.shape.to_mask(after.shape)
        outline = mask & ~ndi.binary_erosion(mask)
        rgb[outline] = SHADOWED_COLOUR if block.has_shadow else SHADOWLESS_COLOUR
    image = Image.fromarray(rgb)
    draw = ImageDraw.Draw(image)
    for block in blocks:
        if block.shape is not None:
            continue
        x, y, width, height = block.bbox
        colour = SHADOWED_COLOUR if block.has_shadow else SHADOWLESS_COLOUR
        draw.rectangle((x, y, x + width - 1, y + height - 1), outline=colour)
    return image


def write_overlay(
    after: Raster, blocks: Sequence["FinalBlock"], path: PathLike
) -> Path:
    path = _prepare(path)
    build_overlay(after, blocks).save(path)
    return path


def to_plain(value: Any) -> Any:
    """Convert records to YAML-safe builtins."""
    if is_dataclass(value) and not isinstance(value, type):
        return {f.name: to_plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, dict):
        return {str(key): to_plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(item) for item in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_yaml(data: Any, path: PathLike) -> Path:
    path = _prepare(path)
    with open(path, "w", encoding="utf-8") as stream:
        yaml.safe_dump(to_plain(data), stream, sort_keys=False)
    return path


class _BinaryBuilder:
    def __init__(self, magic: bytes):
        self.parts = [struct.pack(f"<{len(magic)}sI", magic, FORMAT_VERSION)]

    def add_layout(self, layout: "HogLayout") -> None:
        self.add_values(
            "<6i",
            layout.window_width,
            layout.window_height,
            layout.cell,
            layout.block_cells,
            layout.block_stride,
            layout.bins,
        )

    def add_values(self, fmt: str, *values) -> None:
        self.parts.append(struct.pack(fmt, *values))

    def add_array(self, values: np.ndarray) -> None:
        self.parts.append(np.ascontiguousarray(values, dtype="<f8").tobytes())

    def build(self) -> bytes:
        return b"".join(self.parts)


def build_model(model: "SvrModel") -> bytes:
    meta = model.meta
    builder = _BinaryBuilder(MODEL_MAGIC)
    builder.add_layout(model.layout)
    builder.add_values("<4d", model.bias, model.epsilon, model.C, model.bias_scale)
    builder.add_values(
        "<4q", meta.n_positive, meta.n_negative, meta.seed, meta.passes
    )
    builder.add_values("<2d", meta.objective, meta.relative_gap)
    builder.add_values(
        "<BII", int(meta.converged), len(meta.dual_history), model.weights.size
    )
    builder.add_array(np.asarray(meta.dual_history, dtype=np.float64))
    builder.add_array(model.weights)
    return builder.build()


def write_model(model: "SvrModel", path: PathLike) -> Path:
    path = _prepare(path)
    path.write_bytes(build_model(model))
    return path


def build_sample_set(samples: "SampleSet") -> bytes:
    source = samples.source.encode("utf-8")
    builder = _BinaryBuilder(SAMPLES_MAGIC)
    builder.add_layout(samples.layout)
    builder.add_values(f"<I{len(source)}s", len(source), source)
    builder.add_values("<2I", len(samples.positives), len(samples.negatives))
    builder.add_array(samples.positives)
    builder.add_array(samples.negatives)
    return builder.build()


def write_sample_set(samples: "SampleSet", path: PathLike) -> Path:
    path = _prepare(path)
    path.write_bytes(build_sample_set(samples))
    return path
