from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from blockfall_lib import builders, parsers
from blockfall_lib.blob import Polarity, Region
from blockfall_lib.evaluation import GroundTruthBlock
from blockfall_lib.exceptions import ManifestError, ModelFormatError
from blockfall_lib.fusion import FinalBlock, Provenance
from blockfall_lib.hog import NEGATIVE, POSITIVE, AnnotationBox, HogLayout, SampleSet
from blockfall_lib.raster import Raster
from blockfall_lib.svm import SvrModel, TrainingMeta
from blockfall_lib.synthgen import Background, SceneSpec

TESTCASE_DIR: Path = Path(__file__).resolve().parent / "testcase" / "manifests"


def get_testcase_path(kind: str, filename: str) -> Path:
    return TESTCASE_DIR / kind / filename


failed_manifests = [
    ("missing-after.yaml", TypeError),
    ("unknown-key.yaml", TypeError),
    ("unknown-nested-key.yaml", TypeError),
    ("section-not-mapping.yaml", TypeError),
    ("top-level-list.yaml", TypeError),
    ("bad-incidence.yaml", ValueError),
    ("bad-workers.yaml", ValueError),
    ("small-registration-tile.yaml", ValueError),
    ("canny-thresholds-swapped.yaml", ValueError),
    ("missing-image.yaml", ManifestError),
    ("broken-yaml.yaml", ManifestError),
    ("missing-truth.yaml", ManifestError),
]


@pytest.mark.parametrize("filename,exc", failed_manifests)
def test_corrupted_manifest(filename: str, exc: Exception):
    with pytest.raises(exc):
        parsers.parse_manifest(get_testcase_path("fail", filename), check_models=False)


def test_minimal_manifest_defaults():
    manifest = parsers.parse_manifest(
        get_testcase_path("pass", "minimal.yaml"), check_models=False
    )
    assert manifest.before == TESTCASE_DIR / "images" / "before.pgm"
    assert manifest.output_dir == TESTCASE_DIR / "out"
    assert manifest.sun.anti_sun_azimuth == 315.0
    assert manifest.pixel_scale == 0.25
    assert manifest.tile_size == 200
    assert manifest.detection.upscale_factor == 8
    assert manifest.blob.canny.strong == 30.0
    assert manifest.evaluation.truth is None
    assert manifest.stages.coregister
    assert manifest.hog is None


def test_full_manifest():
    manifest = parsers.parse_manifest(
        get_testcase_path("pass", "full.yaml"), check_models=False
    )
    assert manifest.workers == 2
    assert manifest.hog == HogLayout()
    assert not manifest.stages.coregister
    assert manifest.registration.max_iter == 20
    assert manifest.registration.normalize_percentiles == (1, 99)
    assert manifest.detection.max_levels == 10
    assert manifest.grouping.min_votes == 1
    assert manifest.blob.sigma_fraction == 0.75
    assert (manifest.blob.canny.strong, manifest.blob.canny.weak) == (40, 20)
    assert manifest.blob.pairing.cone_deg == 30
    assert manifest.blob.pairing.min_distance == 10.0
    assert not manifest.fusion.overlay
    assert manifest.evaluation.truth == TESTCASE_DIR / "images" / "truth.csv"


def test_manifest_models_are_checked():
    with pytest.raises(ManifestError):
        parsers.parse_manifest(get_testcase_path("pass", "minimal.yaml"))


def test_manifest_overrides(tmp_path):
    manifest = parsers.parse_manifest(
        get_testcase_path("pass", "minimal.yaml"),
        {"output_dir": str(tmp_path), "workers": 3},
        check_models=False,
    )
    assert manifest.output_dir == tmp_path
    assert manifest.workers == 3


def test_read_plain_pgm():
    raster = parsers.read_raster(TESTCASE_DIR / "images" / "before.pgm", 0.5)
    assert raster.shape == (3, 4)
    assert raster.values[1].tolist() == [200, 250, 10, 20]
    assert raster.pixel_scale == 0.5


def test_read_colour_image_as_gray(tmp_path):
    path = tmp_path / "rgb.png"
    Image.new("RGB", (5, 4), (90, 90, 90)).save(path)
    assert np.all(parsers.read_raster(path).values == 90)


def test_read_garbage_image(tmp_path):
    path = tmp_path / "noise.png"
    path.write_bytes(b"not an image")
    with pytest.raises(ValueError):
        parsers.read_raster(path)


def test_raster_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    raster = Raster(rng.integers(0, 256, (20, 30)).astype(float))
    path = builders.write_raster(raster, tmp_path / "nested" / "image.png")
    assert np.array_equal(parsers.read_raster(path).values, raster.values)


def test_mask_round_trip(tmp_path):
    mask = np.zeros((6, 7), dtype=bool)
    mask[2:4, 1:5] = True
    path = builders.write_mask(mask, tmp_path / "mask.png")
    assert np.array_equal(parsers.read_mask(path), mask)


def test_truth_from_label_image(tmp_path):
    labels = np.zeros((30, 40), dtype=np.int32)
    labels[2:5, 3:9] = 1
    labels[20:28, 30:33] = 3
    labels[10, 10] = 300
    path = builders.write_label_image(labels, tmp_path / "labels.png")
    truth = parsers.parse_ground_truth(path)
    assert [block.id for block in truth] == [1, 3, 300]
    assert truth[0].bbox == (3, 2, 6, 3) and truth[0].area_px == 18
    assert truth[1].centroid == pytest.approx((31.0, 23.5))
    assert truth[2].area_px == 1


def test_label_image_range(tmp_path):
    with pytest.raises(ValueError):
        builders.write_label_image(np.full((2, 2), 70000), tmp_path / "big.png")


def test_truth_csv_without_area(tmp_path):
    path = tmp_path / "truth.csv"
    path.write_text("id,x,y,w,h\n4,10,12,3,5\n", encoding="utf-8")
    (block,) = parsers.parse_ground_truth(path)
    assert block.area_px == 15
    assert block.centroid == (11.0, 14.0)


def test_csv_round_trip(tmp_path):
    annotations = [
        AnnotationBox(1, 2, 32, 40, POSITIVE),
        AnnotationBox(0, 0, 64, 80, NEGATIVE),
    ]
    path = builders.write_csv(annotations, tmp_path / "boxes.csv")
    assert path.read_text(encoding="utf-8").splitlines()[0] == "x,y,w,h,label"
    assert parsers.parse_annotations(path) == annotations


def test_csv_missing_column(tmp_path):
    path = tmp_path / "boxes.csv"
    path.write_text("x,y,w\n1,2,3\n", encoding="utf-8")
    with pytest.raises(TypeError):
        parsers.parse_annotations(path)


def test_csv_bad_row_names_line(tmp_path):
    path = tmp_path / "boxes.csv"
    path.write_text("x,y,w,h,label\n1,2,3,4,positive\n1,2,3,4,perhaps\n")
    with pytest.raises(ValueError, match=r"boxes\.csv:3"):
        parsers.parse_annotations(path)


def test_empty_table_needs_record_type(tmp_path):
    with pytest.raises(ValueError):
        builders.write_csv([], tmp_path / "empty.csv")
    path = builders.write_csv([], tmp_path / "empty.csv", FinalBlock)
    assert parsers.parse_final_blocks(path) == []


def test_final_blocks_table(tmp_path):
    blocks = [
        FinalBlock(1, (5.0, 6.0), (3, 4, 5, 5), 20, 0.25, True, Provenance.MSER),
        FinalBlock(2, (50.5, 8.0), (48, 6, 6, 5), 26, 0.25, False),
    ]
    path = builders.write_csv(blocks, tmp_path / "final_blocks.csv")
    parsed = parsers.parse_final_blocks(path)
    assert [block.to_csv_row() for block in parsed] == [
        block.to_csv_row() for block in blocks
    ]


def model(layout=None) -> SvrModel:
    layout = layout or HogLayout()
    rng = np.random.default_rng(1)
    meta = TrainingMeta(3, 9, 5, 0.75, 12, 1e-4, True, (2.0, 1.5, 1.25))
    return SvrModel(
        rng.normal(size=layout.descriptor_length), -0.3, 0.1, 0.01, 10.0, layout, meta
    )


def test_model_round_trip(tmp_path):
    original = model()
    path = builders.write_model(original, tmp_path / "after.svr")
    loaded = parsers.read_model(path)
    assert np.array_equal(loaded.weights, original.weights)
    assert (loaded.bias, loaded.epsilon, loaded.C) == (-0.3, 0.1, 0.01)
    assert loaded.meta == original.meta
    assert loaded.layout == original.layout


def test_model_with_custom_layout(tmp_path):
    layout = HogLayout(window_width=32, window_height=32, bins=6)
    path = builders.write_model(model(layout), tmp_path / "small.svr")
    assert parsers.read_model(path).layout == layout


@pytest.mark.parametrize(
    "mangle",
    [
        lambda data: b"XXXXXXXX" + data[8:],
        lambda data: data[:8] + b"\x02" + data[9:],
        lambda data: data[:-3],
        lambda data: data + b"\x00",
    ],
)
def test_corrupted_model(tmp_path, mangle):
    path = tmp_path / "model.svr"
    path.write_bytes(mangle(builders.build_model(model())))
    with pytest.raises(ModelFormatError):
        parsers.read_model(path)


def test_model_weights_must_fit_layout(tmp_path):
    short = SvrModel(np.zeros(10))
    path = builders.write_model(short, tmp_path / "short.svr")
    with pytest.raises(ModelFormatError):
        parsers.read_model(path)


def test_sample_set_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    samples = SampleSet(rng.random((3, 2268)), rng.random((5, 2268)), "difference")
    path = builders.write_sample_set(samples, tmp_path / "samples.bin")
    loaded = parsers.read_sample_set(path)
    assert loaded.source == "difference"
    assert np.array_equal(loaded.positives, samples.positives)
    assert np.array_equal(loaded.negatives, samples.negatives)


def test_scene_spec_round_trip(tmp_path):
    spec = SceneSpec(width=120, height=90, seed=4, background=Background.LAYERED)
    path = builders.write_yaml(spec, tmp_path / "scene.yaml")
    assert parsers.parse_scene_spec(path) == spec


def test_to_plain():
    plain = builders.to_plain(
        {"path": Path("/tmp/x"), "polarity": Polarity.DARK, "n": np.int64(3)}
    )
    assert plain == {"path": "/tmp/x", "polarity": "dark", "n": 3}
    assert type(plain["n"]) is int and type(plain["polarity"]) is str


def test_overlay_colours():
    after = Raster(np.full((20, 20), 100.0))
    rows, cols = np.mgrid[5:10, 5:10]
    shaped = FinalBlock(1, (7.0, 7.0), (5, 5, 5, 5), 25, has_shadow=True)
    shaped.shape = Region(rows, cols)
    boxed = FinalBlock(2, (15.0, 15.0), (13, 13, 4, 4), 16)
    image = np.asarray(builders.build_overlay(after, [shaped, boxed]))
    assert tuple(image[5, 5]) == builders.SHADOWED_COLOUR
    assert tuple(image[7, 7]) == (100, 100, 100)
    assert tuple(image[13, 13]) == builders.SHADOWLESS_COLOUR
    assert tuple(image[0, 0]) == (100, 100, 100)


def test_truth_table_round_trip(tmp_path):
    truth = [GroundTruthBlock(1, (2, 3, 4, 5), 17, (3.5, 5.0))]
    path = builders.write_csv(truth, tmp_path / "truth.csv")
    (parsed,) = parsers.parse_ground_truth(path)
    assert parsed == truth[0]
