"""Detect new block falls in before/after images of the same terrain."""

__all__ = [
    "Raster",
    "SunGeometry",
    "PairManifest",
    "TrainingManifest",
    "FinalBlock",
    "MetricsReport",
    "SceneSpec",
    "generate_scene",
    "run_pipeline",
    "train_models",
]

from ._version import __version__  # noqa: F401 unused but used
from .config import PairManifest, TrainingManifest
from .evaluation import MetricsReport
from .fusion import FinalBlock
from .pipeline import run_pipeline, train_models
from .raster import Raster, SunGeometry
from .synthgen import SceneSpec, generate_scene
