import numpy as np
import pytest
from scipy import ndimage as ndi

from blockfall_lib.blob import (
    BlockCandidate,
    Detector,
    PairingParams,
    Polarity,
    Region,
    canny_edges,
    compute_thresholds,
    detect_mser,
    detect_simple_blobs,
    finalize_candidates,
    gradient_magnitude,
    merge_region_detections,
    pair_blocks_shadows,
    refine_with_edges,
    run_blob_chain,
    threshold_bands,
    watershed_refine,
)
from blockfall_lib.raster import Raster, SunGeometry
from blockfall_lib.utils import angular_distance, azimuth_of

# Sun in the bottom right: shadows fall toward the top left (azimuth 315).
SUN = SunGeometry(135.0, 60.0)
PROPERTY_SEEDS = range(200)


def square(row, col, size, detectors=Detector.BOTH, polarity=Polarity.BRIGHT):
    rows, cols = np.mgrid[row : row + size, col : col + size]
    return Region(rows, cols, polarity, detectors)


def test_thresholds_of_two_level_raster():
    values = np.full((10, 10), 118.0)
    values[:, 5:] = 138.0
    bands = compute_thresholds(Raster(values))
    assert (bands.dark_max, bands.bright_min) == (123, 133)
    assert bands.mean == pytest.approx(128.0)
    assert bands.sigma == pytest.approx(10.0)


def test_constant_raster_is_degenerate():
    diff = Raster(np.full((8, 8), 128.0))
    bands = compute_thresholds(diff)
    assert bands.degenerate
    bright, dark = threshold_bands(diff, bands)
    assert not bright.any() and not dark.any()


@pytest.mark.parametrize("seed", PROPERTY_SEEDS)
def test_bands_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    values = rng.integers(0, 256, size=(12, 12)).astype(float)
    bands = compute_thresholds(Raster(values))
    mean = sum(values.ravel()) / values.size
    sigma = (sum((v - mean) ** 2 for v in values.ravel()) / values.size) ** 0.5
    assert bands.dark_max <= mean <= bands.bright_min
    assert abs(bands.dark_max - (mean - 0.5 * sigma)) <= 0.5 + 1e-9
    assert abs(bands.bright_min - (mean + 0.5 * sigma)) <= 0.5 + 1e-9
    bright, dark = threshold_bands(Raster(values), bands)
    for (row, col), value in np.ndenumerate(values):
        assert bright[row, col] == (value > bands.bright_min)
        assert dark[row, col] == (value < bands.dark_max)
        assert not (bright[row, col] and dark[row, col])


def test_region_rejects_tiny_and_sorts():
    with pytest.raises(ValueError):
        Region([0, 0, 1], [0, 1, 0])
    region = Region([1, 0, 1, 0], [1, 1, 0, 0])
    assert region.rows.tolist() == [0, 0, 1, 1]
    assert region.cols.tolist() == [0, 1, 0, 1]
    assert region.bbox == (0, 0, 2, 2)
    assert region.is_four_connected()


def nested_squares() -> np.ndarray:
    values = np.full((200, 200), 100.0)
    values[90:106, 90:106] = 130.0
    values[94:102, 94:102] = 160.0
    return values


def test_mser_finds_nested_squares():
    regions = detect_mser(Raster(nested_squares()), Polarity.BRIGHT)
    assert [region.area_px for region in regions] == [256, 64]
    assert regions[0].bbox == (90, 90, 16, 16)
    assert regions[1].bbox == (94, 94, 8, 8)
    assert all(region.detectors == Detector.MSER for region in regions)


def disc_raster(centres, radius, shape=(200, 200), background=100.0, value=160.0):
    rows, cols = np.indices(shape)
    values = np.full(shape, background)
    for row, col in centres:
        values[(rows - row) ** 2 + (cols - col) ** 2 <= radius**2] = value
    return values


def test_mser_finds_single_disc():
    (region,) = detect_mser(Raster(disc_raster([(100, 100)], 6)), Polarity.BRIGHT)
    assert abs(region.area_px - np.pi * 36) <= 0.15 * np.pi * 36
    assert region.centroid == pytest.approx((100.0, 100.0))


def test_mser_dark_polarity_mirrors_bright():
    inverted = Raster(255.0 - nested_squares())
    regions = detect_mser(inverted, Polarity.DARK)
    assert [region.bbox for region in regions] == [(90, 90, 16, 16), (94, 94, 8, 8)]
    assert all(region.polarity == Polarity.DARK for region in regions)
    assert detect_mser(inverted, Polarity.BRIGHT) == []


def test_mser_flat_raster():
    assert detect_mser(Raster(np.full((20, 20), 90.0)), Polarity.BRIGHT) == []


def test_simple_blob_tracks_square():
    values = np.full((64, 64), 128.0)
    values[20:30, 30:40] = 200.0
    diff = Raster(values)
    bands = compute_thresholds(diff)
    (blob,) = detect_simple_blobs(diff, bands, Polarity.BRIGHT)
    assert blob.area_px == 100
    assert blob.centroid == pytest.approx((34.5, 24.5))
    assert blob.detectors == Detector.SIMPLE_BLOB
    assert detect_simple_blobs(diff, bands, Polarity.DARK) == []


def test_simple_blob_keeps_close_discs_apart():
    # disc edges at columns 25 and 29 leave three background pixels between
    diff = Raster(
        disc_raster([(32, 20), (32, 34)], 5, (64, 64), background=128.0, value=200.0)
    )
    blobs = detect_simple_blobs(diff, compute_thresholds(diff), Polarity.BRIGHT)
    centroids = sorted(blob.centroid for blob in blobs)
    assert centroids == [pytest.approx((20.0, 32.0)), pytest.approx((34.0, 32.0))]


def test_simple_blob_needs_repeatability():
    values = np.full((40, 40), 128.0)
    # bright only past the first threshold
    values[10:14, 10:14] = 135.0
    diff = Raster(values)
    bands = compute_thresholds(diff)
    assert bands.bright_min < 135 <= bands.bright_min + 10
    assert detect_simple_blobs(diff, bands, Polarity.BRIGHT) == []


def step_raster() -> Raster:
    values = np.full((32, 32), 50.0)
    values[:, 16:] = 200.0
    return Raster(values)


def test_canny_finds_step():
    edges = canny_edges(step_raster())
    rows, cols = np.nonzero(edges)
    assert set(rows.tolist()) == set(range(32))
    assert set(cols.tolist()) <= {15, 16}


def test_canny_flat_has_no_edges():
    assert not canny_edges(Raster(np.full((16, 16), 128.0))).any()


@pytest.mark.parametrize("strong,weak", [(10.0, 20.0), (30.0, 0.0), (30.0, -1.0)])
def test_canny_invalid_thresholds(strong, weak):
    with pytest.raises(ValueError):
        canny_edges(step_raster(), strong, weak)


@pytest.mark.parametrize("seed", PROPERTY_SEEDS)
def test_canny_hysteresis(seed):
    rng = np.random.default_rng(seed)
    values = ndi.gaussian_filter(rng.uniform(0, 255, (32, 32)), 1.5)
    values = np.clip((values - values.mean()) * 6 + 128, 0, 255)
    diff = Raster(values)
    edges = canny_edges(diff, strong=40.0, weak=20.0)
    magnitude, _, _ = gradient_magnitude(diff)
    assert np.all(magnitude[edges] >= 20.0)
    labels, count = ndi.label(edges, structure=np.ones((3, 3)))
    for label in range(1, count + 1):
        assert magnitude[labels == label].max() >= 40.0


def test_merge_unifies_detectors():
    mser = [square(10, 10, 6, Detector.MSER), square(40, 40, 4, Detector.MSER)]
    blobs = [square(10, 11, 6, Detector.SIMPLE_BLOB)]
    merged = merge_region_detections(mser, blobs, width=64)
    assert len(merged) == 2
    assert merged[0].detectors == Detector.BOTH
    assert merged[0].dual_detected
    assert merged[1].detectors == Detector.MSER


def test_merge_keeps_small_overlap_apart():
    first = square(0, 0, 10, Detector.MSER)
    second = square(0, 8, 10, Detector.SIMPLE_BLOB)
    assert len(merge_region_detections([first], [second], width=32)) == 2


def test_pairing_picks_shadow_against_sun():
    block = square(50, 50, 8, Detector.MSER)
    wrong = square(62, 62, 8, Detector.MSER, Polarity.DARK)
    right = square(42, 42, 8, Detector.MSER, Polarity.DARK)
    (candidate,) = pair_blocks_shadows([block], [wrong, right], SUN)
    assert candidate.shadow is right
    assert candidate.pair_angle_deg == pytest.approx(315.0)


def test_unpaired_block_needs_both_detectors():
    lone = square(10, 10, 6, Detector.MSER)
    confirmed = square(40, 40, 6, Detector.BOTH)
    candidates = pair_blocks_shadows([lone, confirmed], [], SUN)
    assert [c.block for c in candidates] == [confirmed]
    assert not candidates[0].has_shadow


def test_closer_block_wins_shadow():
    shadow = square(30, 30, 6, Detector.MSER, Polarity.DARK)
    near = square(36, 36, 6, Detector.MSER)
    far = square(38, 38, 8, Detector.MSER)
    candidates = pair_blocks_shadows([far, near], [shadow], SUN)
    assert len(candidates) == 1
    assert candidates[0].block is near


def test_small_shadow_is_inadequate():
    block = square(50, 50, 12)
    speck = square(44, 44, 2, Detector.MSER, Polarity.DARK)
    (candidate,) = pair_blocks_shadows([block], [speck], SUN)
    assert not candidate.has_shadow


@pytest.mark.parametrize("seed", PROPERTY_SEEDS)
def test_pairing_properties(seed):
    rng = np.random.default_rng(seed)
    flags = [Detector.MSER, Detector.SIMPLE_BLOB, Detector.BOTH]

    def random_regions(count, polarity):
        return [
            square(
                int(rng.integers(0, 80)),
                int(rng.integers(0, 80)),
                int(rng.integers(2, 9)),
                flags[int(rng.integers(0, 3))],
                polarity,
            )
            for _ in range(count)
        ]

    bright = random_regions(int(rng.integers(0, 8)), Polarity.BRIGHT)
    dark = random_regions(int(rng.integers(0, 8)), Polarity.DARK)
    params = PairingParams()
    candidates = pair_blocks_shadows(bright, dark, SUN, params)
    shadows = [id(c.shadow) for c in candidates if c.has_shadow]
    assert len(shadows) == len(set(shadows))
    for candidate in candidates:
        if not candidate.has_shadow:
            assert candidate.block.dual_detected
            continue
        (bx, by), (sx, sy) = candidate.block.centroid, candidate.shadow.centroid
        distance = np.hypot(sx - bx, sy - by)
        reach = max(1.5 * candidate.block.equivalent_diameter, 10.0)
        assert distance <= reach
        angle = azimuth_of(sx - bx, sy - by)
        assert angular_distance(angle, SUN.anti_sun_azimuth) <= 45.0
        assert candidate.shadow.area_px >= 0.25 * candidate.block.area_px


def test_refine_cuts_along_edge():
    values = np.full((40, 40), 128.0)
    values[10:30, 10:30] = 180.0
    values[15, 25] = 250.0
    edges = np.zeros((40, 40), dtype=bool)
    edges[10:30, 20] = True
    candidate = BlockCandidate(square(10, 10, 20))
    refined = refine_with_edges(candidate, edges, Raster(values))
    assert refined.block.area_px == 160
    assert refined.block.bbox == (22, 10, 8, 20)
    assert refined.block.is_four_connected()


def test_refine_without_edges_keeps_shape():
    candidate = BlockCandidate(square(10, 10, 5))
    edges = np.zeros((40, 40), dtype=bool)
    assert refine_with_edges(candidate, edges, Raster(np.zeros((40, 40)))) is candidate


def test_refine_keeps_shape_when_cut_too_deep():
    candidate = BlockCandidate(square(10, 10, 3))
    edges = np.zeros((40, 40), dtype=bool)
    edges[11, 11] = True
    refined = refine_with_edges(candidate, edges, Raster(np.zeros((40, 40))))
    assert refined.block.area_px == 9


def test_refine_keeps_interior_inside_edge_ring():
    values = np.full((40, 40), 128.0)
    values[10:20, 10:20] = 180.0
    values[15, 15] = 200.0
    edges = np.zeros((40, 40), dtype=bool)
    edges[9:21, 9:21] = True
    edges[10:20, 10:20] = False
    candidate = BlockCandidate(square(10, 10, 10))
    refined = refine_with_edges(candidate, edges, Raster(values))
    interior = ndi.binary_erosion(candidate.block.to_mask((40, 40)))
    assert np.array_equal(refined.block.to_mask((40, 40)), interior)
    assert refined.block.area_px == 64


def test_watershed_grows_marker_to_block():
    after = np.full((60, 60), 100.0)
    after[10:20, 10:20] = 200.0
    bands = np.zeros((60, 60), dtype=bool)
    bands[10:20, 10:20] = True
    marker = square(12, 12, 6)
    (shaped,) = watershed_refine(Raster(after), bands, [BlockCandidate(marker)])
    mask = shaped.block.to_mask((60, 60))
    assert mask[12:18, 12:18].all()
    assert shaped.block.area_px >= 64
    x, y, w, h = shaped.block.bbox
    assert x >= 9 and y >= 9 and x + w <= 21 and y + h <= 21


@pytest.mark.parametrize("seed", PROPERTY_SEEDS)
def test_watershed_basins_are_disjoint(seed):
    rng = np.random.default_rng(seed)
    after = Raster(rng.uniform(40, 220, (50, 50)))
    bands = rng.random((50, 50)) > 0.6
    candidates = [
        BlockCandidate(square(5, 5, 4), square(0, 0, 3, polarity=Polarity.DARK), 315.0),
        BlockCandidate(square(30, 30, 5), square(22, 22, 4, polarity=Polarity.DARK)),
    ]
    shaped = watershed_refine(after, bands, candidates)
    assert len(shaped) == 2
    masks = []
    for before, result in zip(candidates, shaped):
        for old, new in ((before.block, result.block), (before.shadow, result.shadow)):
            mask = new.to_mask((50, 50))
            assert mask[old.rows, old.cols].all()
            masks.append(mask)
    assert np.sum(masks, axis=0).max() == 1


def test_watershed_splits_touching_objects():
    after = np.full((40, 40), 100.0)
    after[10:20, 10:20] = 200.0
    after[10:20, 20:30] = 160.0
    objects = after > 100.0
    candidates = [BlockCandidate(square(12, 12, 6)), BlockCandidate(square(12, 22, 6))]
    left, right = watershed_refine(Raster(after), objects, candidates)
    left_mask = left.block.to_mask((40, 40))
    right_mask = right.block.to_mask((40, 40))
    assert not np.any(left_mask & right_mask)
    assert left_mask[12:18, 12:18].all() and right_mask[12:18, 22:28].all()
    # object rims may fall to the background basin
    assert (left_mask | right_mask)[ndi.binary_erosion(objects)].all()
    assert not np.any((left_mask | right_mask) & ~objects)


def test_watershed_of_nothing():
    assert watershed_refine(Raster(np.zeros((5, 5))), np.ones((5, 5), bool), []) == []


def test_finalize_unlinks_moved_shadow():
    block = square(50, 50, 8, Detector.MSER)
    confirmed = square(20, 20, 8, Detector.BOTH)
    behind = square(62, 62, 8, Detector.MSER, Polarity.DARK)
    final = finalize_candidates(
        [BlockCandidate(block, behind, 315.0), BlockCandidate(confirmed, behind)],
        SUN,
    )
    assert len(final) == 1
    assert final[0].block is confirmed and not final[0].has_shadow


def test_finalize_keeps_good_pair():
    block = square(50, 50, 8, Detector.MSER)
    shadow = square(42, 42, 8, Detector.MSER, Polarity.DARK)
    (final,) = finalize_candidates([BlockCandidate(block, shadow)], SUN)
    assert final.pair_angle_deg == pytest.approx(315.0)


def block_and_shadow():
    diff = np.full((100, 100), 128.0)
    after = np.full((100, 100), 100.0)
    diff[50:60, 50:60] = 200.0
    after[50:60, 50:60] = 200.0
    diff[42:50, 42:50] = 50.0
    after[42:50, 42:50] = 40.0
    return Raster(diff), Raster(after)


def test_blob_chain_on_block_with_shadow():
    diff, after = block_and_shadow()
    result = run_blob_chain(diff, after, SUN)
    assert len(result.bright) == 1 and result.bright[0].dual_detected
    assert len(result.dark) == 1
    (final,) = result.final
    assert final.has_shadow
    assert final.block.centroid == pytest.approx((54.5, 54.5), abs=1.5)
    assert angular_distance(final.pair_angle_deg, 315.0) <= 10.0


def test_blob_chain_on_flat_tile():
    result = run_blob_chain(
        Raster(np.full((50, 50), 128.0)), Raster(np.full((50, 50), 90.0)), SUN
    )
    assert result.bands.degenerate
    assert result.final == []
