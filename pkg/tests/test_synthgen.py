import logging
from dataclasses import replace

import numpy as np
import pytest

from blockfall_lib.hog import NEGATIVE, POSITIVE
from blockfall_lib.raster import SunGeometry
from blockfall_lib.synthgen import Background, SceneSpec, generate_scene
from blockfall_lib.utils import angular_distance, azimuth_of


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneSpec(width=200, height=200, n_blocks=12, seed=3))


def test_same_spec_same_scene(scene):
    again = generate_scene(scene.spec)
    assert np.array_equal(again.before.values, scene.before.values)
    assert np.array_equal(again.after.values, scene.after.values)
    assert np.array_equal(again.labels, scene.labels)
    assert [b.to_csv_row() for b in again.truth] == [
        b.to_csv_row() for b in scene.truth
    ]


def test_other_seed_other_scene(scene):
    other = generate_scene(SceneSpec(width=200, height=200, n_blocks=12, seed=4))
    assert not np.array_equal(other.after.values, scene.after.values)


def test_blocks_brighten_and_shadows_darken(scene):
    assert scene.placed > 0
    before, after = scene.before.values, scene.after.values
    for block in scene.truth:
        inside = scene.labels == block.id
        assert after[inside].mean() > before[inside].mean() + 15
        shade = scene.shadow_labels == block.id
        if shade.any():
            assert after[shade].mean() < before[shade].mean() - 15


def test_truth_matches_labels(scene):
    assert not np.any((scene.labels > 0) & (scene.shadow_labels > 0))
    for block in scene.truth:
        rows, cols = np.nonzero(scene.labels == block.id)
        assert block.area_px == rows.size
        assert block.bbox == (
            cols.min(),
            rows.min(),
            cols.max() - cols.min() + 1,
            rows.max() - rows.min() + 1,
        )


def test_shadows_point_away_from_sun(scene):
    assert scene.shadows
    truth = {block.id: block for block in scene.truth}
    for block_id, (sx, sy) in scene.shadows.items():
        bx, by = truth[block_id].centroid
        angle = azimuth_of(sx - bx, sy - by)
        assert angular_distance(angle, scene.spec.sun.anti_sun_azimuth) <= 10.0


def test_no_blocks_no_change():
    spec = SceneSpec(width=64, height=64, n_blocks=0, noise_sigma=0.0)
    scene = generate_scene(spec)
    assert scene.truth == []
    assert np.array_equal(scene.before.values, scene.after.values)


def test_flat_background():
    spec = SceneSpec(
        width=32, height=32, n_blocks=0, noise_sigma=0.0, background=Background.FLAT
    )
    assert np.all(generate_scene(spec).after.values == 110.0)


def test_changing_background_differs_without_blocks():
    spec = SceneSpec(
        width=128,
        height=128,
        n_blocks=0,
        noise_sigma=0.0,
        background=Background.CHANGING,
    )
    scene = generate_scene(spec)
    assert np.abs(scene.before.values - scene.after.values).max() > 5


def test_global_shift_moves_before():
    spec = SceneSpec(width=96, height=96, n_blocks=0, noise_sigma=0.0)
    still = generate_scene(spec)
    moved = generate_scene(replace(spec, global_shift=(3.0, 0.0)))
    assert np.array_equal(moved.after.values, still.after.values)
    assert np.allclose(
        moved.before.values[:, 10:80], still.before.values[:, 7:77], atol=1.0
    )


def test_under_placement_is_logged(caplog):
    spec = SceneSpec(
        width=40, height=40, n_blocks=40, block_area_range=(60.0, 80.0), max_tries=5
    )
    with caplog.at_level(logging.WARNING, logger="blockfall_lib.synthgen"):
        scene = generate_scene(spec)
    assert scene.placed < scene.requested == 40
    assert "requested blocks" in caplog.text


def test_training_annotations(scene):
    annotations = scene.training_annotations()
    positives = [box for box in annotations if box.label == POSITIVE]
    negatives = [box for box in annotations if box.label == NEGATIVE]
    assert len(positives) == scene.placed
    assert negatives
    footprint = (scene.labels > 0) | (scene.shadow_labels > 0)
    for box in negatives:
        window = footprint[box.y : box.y + box.height, box.x : box.x + box.width]
        assert not window.any()
    for box in annotations:
        assert box.x >= 0 and box.y >= 0
        assert box.x + box.width <= 200 and box.y + box.height <= 200


@pytest.mark.parametrize(
    "kwargs",
    [
        {"width": 8},
        {"n_blocks": -1},
        {"block_area_range": (20.0, 10.0)},
        {"shadow_fraction": 1.5},
        {"background": "marble"},
        {"noise_sigma": -1.0},
    ],
)
def test_invalid_spec(kwargs):
    with pytest.raises(ValueError):
        SceneSpec(**kwargs)


def test_sun_follows_spec():
    spec = SceneSpec(
        width=200, height=200, n_blocks=8, seed=1, sun=SunGeometry(45.0, 50.0)
    )
    scene = generate_scene(spec)
    truth = {block.id: block for block in scene.truth}
    for block_id, (sx, sy) in scene.shadows.items():
        bx, by = truth[block_id].centroid
        assert angular_distance(azimuth_of(sx - bx, sy - by), 225.0) <= 10.0
