import numpy as np
import pytest

from blockfall_lib.evaluation import (
    GroundTruthBlock,
    MetricsReport,
    RateRow,
    SizeClass,
    aggregate,
    area_regression,
    compute_rates,
    format_table,
    match_detections,
)
from blockfall_lib.fusion import FinalBlock

# region, size class, actual, predicted, true positives, TPR %, FDR %
REPORTED_ROWS = [
    ("a", "all", 100, 61, 59, "59.00", "3.28"),
    ("a", "large", 59, 50, 46, "77.97", "8.00"),
    ("b", "all", 80, 48, 47, "58.75", "2.08"),
    ("b", "large", 48, 35, 34, "70.83", "2.86"),
    ("c", "all", 71, 73, 63, "88.73", "13.70"),
    ("c", "large", 56, 56, 49, "87.50", "12.50"),
    ("d", "all", 180, 122, 101, "56.11", "17.21"),
    ("d", "large", 94, 79, 71, "75.53", "10.13"),
    ("e", "all", 24, 21, 15, "62.50", "28.57"),
    ("e", "large", 11, 14, 9, "81.82", "35.71"),
    ("f", "all", 140, 82, 79, "56.43", "3.66"),
    ("f", "large", 105, 72, 71, "67.62", "1.39"),
    ("total", "all", 595, 407, 364, "61.18", "10.57"),
    ("total", "large", 373, 306, 280, "75.07", "8.50"),
]


@pytest.mark.parametrize(
    "region,size_class,actual,predicted,tp,tpr,fdr", REPORTED_ROWS
)
def test_rates_of_reported_rows(region, size_class, actual, predicted, tp, tpr, fdr):
    row = RateRow(size_class, actual, predicted, tp, region)
    assert f"{row.tpr:.2f}" == tpr
    assert f"{row.fdr:.2f}" == fdr
    csv_row = row.to_csv_row()
    assert (csv_row["tpr"], csv_row["fdr"]) == (tpr, fdr)


def test_reported_totals_add_up():
    for size_class in ("all", "large"):
        reports = [
            MetricsReport(r, {s: RateRow(s, a, p, t, r)})
            for r, s, a, p, t, _, _ in REPORTED_ROWS
            if s == size_class and r != "total"
        ]
        total = aggregate(reports)[size_class]
        (expected,) = [
            row for row in REPORTED_ROWS if row[:2] == ("total", size_class)
        ]
        counts = (total.total_actual, total.total_predicted, total.true_positives)
        assert counts == expected[2:5]
        assert (f"{total.tpr:.2f}", f"{total.fdr:.2f}") == expected[5:]


def test_no_predictions_is_degenerate():
    row = RateRow(SizeClass.ALL, 5, 0, 0)
    assert row.fdr == 0.0
    assert row.fdr_degenerate
    assert RateRow(SizeClass.ALL, 0, 0, 0).tpr == 0.0


def test_invalid_counts():
    with pytest.raises(ValueError):
        RateRow(SizeClass.ALL, 3, 2, 4)
    with pytest.raises(ValueError):
        RateRow(SizeClass.ALL, -1, 2, 0)


def truth_block(block_id, x, y, w, h, area=None):
    return GroundTruthBlock(block_id, (x, y, w, h), area or w * h)


def detection(block_id, x, y, w, h, area=None):
    return FinalBlock(
        id=block_id,
        centroid=(x + (w - 1) / 2, y + (h - 1) / 2),
        bbox=(x, y, w, h),
        area_px=area or w * h,
    )


def test_identical_sets_match_fully():
    truth = [truth_block(i + 1, 20 * i, 5, 6, 6) for i in range(4)]
    predicted = [detection(i + 1, 20 * i, 5, 6, 6) for i in range(4)]
    matches = match_detections(truth, predicted)
    assert sorted((m.truth_index, m.predicted_index) for m in matches) == [
        (i, i) for i in range(4)
    ]
    assert all(m.iou == pytest.approx(1.0) for m in matches)


def test_disjoint_sets_do_not_match():
    truth = [truth_block(1, 0, 0, 5, 5)]
    predicted = [detection(1, 50, 50, 5, 5)]
    assert match_detections(truth, predicted) == []


def test_one_truth_takes_best_prediction():
    truth = [truth_block(1, 10, 10, 10, 10)]
    predicted = [detection(1, 14, 10, 10, 10), detection(2, 11, 10, 10, 10)]
    (match,) = match_detections(truth, predicted)
    assert match.predicted_index == 1


def test_centroid_inside_counts_as_match():
    truth = [truth_block(1, 0, 0, 20, 20)]
    predicted = [detection(1, 8, 8, 3, 3)]
    (match,) = match_detections(truth, predicted)
    assert match.iou < 0.3


def test_invalid_iou():
    with pytest.raises(ValueError):
        match_detections([], [], iou_min=0.0)


def test_rates_per_size_class():
    # at 0.25 m/px more than 8 px is above 0.5 m2
    truth = [
        truth_block(1, 0, 0, 5, 4),
        truth_block(2, 30, 0, 2, 2),
        truth_block(3, 60, 0, 6, 5),
    ]
    predicted = [
        detection(1, 0, 0, 5, 4, area=18),
        detection(2, 60, 0, 6, 5, area=25),
        detection(3, 90, 40, 5, 1),
    ]
    matches = match_detections(truth, predicted)
    report = compute_rates(matches, truth, predicted, pixel_scale=0.25, region="x")
    counts = {
        name: (row.total_actual, row.total_predicted, row.true_positives)
        for name, row in report.rows.items()
    }
    assert counts == {
        SizeClass.ALL: (3, 3, 2),
        SizeClass.LARGE: (2, 2, 2),
        SizeClass.SMALL: (1, 1, 0),
    }
    assert sorted(report.area_pairs) == [(20, 18), (30, 25)]
    assert report.area_fit is not None
    assert report.area_fit.slope == pytest.approx(0.7)
    assert report["all"].region == "x"


def test_rates_of_equal_sized_blocks():
    truth = [truth_block(1, 0, 0, 5, 4), truth_block(2, 30, 0, 5, 4)]
    predicted = [detection(1, 0, 0, 5, 4), detection(2, 30, 0, 5, 4)]
    report = compute_rates(match_detections(truth, predicted), truth, predicted)
    assert report["all"].true_positives == 2
    assert report["all"].tpr == 100.0
    assert report.area_pairs == [(20, 20), (20, 20)]
    assert report.area_fit is None


def test_regression_recovers_line():
    actual = np.arange(10, 110, 10)
    fit = area_regression([(a, 0.8 * a + 0.1) for a in actual])
    assert fit.slope == pytest.approx(0.8)
    assert fit.offset == pytest.approx(0.1)
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.n_pairs == 10


def test_regression_identity():
    fit = area_regression([(a, a) for a in (4, 9, 16, 25)])
    assert (fit.slope, fit.offset) == pytest.approx((1.0, 0.0), abs=1e-9)
    assert fit.mean_abs_error_px == pytest.approx(0.0)


def test_regression_matches_normal_equations():
    rng = np.random.default_rng(0)
    actual = rng.integers(4, 200, 20).astype(float)
    predicted = 0.9 * actual + rng.normal(0, 5, 20)
    n = len(actual)
    sx, sy = actual.sum(), predicted.sum()
    sxx, sxy = (actual**2).sum(), (actual * predicted).sum()
    slope = (n * sxy - sx * sy) / (n * sxx - sx**2)
    offset = (sy - slope * sx) / n
    fit = area_regression(list(zip(actual, predicted)))
    assert fit.slope == pytest.approx(slope)
    assert fit.offset == pytest.approx(offset)
    assert fit.mean_abs_error_px == pytest.approx(np.abs(predicted - actual).mean())
    reversed_fit = area_regression(list(zip(actual, predicted))[::-1])
    assert reversed_fit.slope == pytest.approx(fit.slope)
    assert reversed_fit.offset == pytest.approx(fit.offset)


@pytest.mark.parametrize("pairs", [[], [(5, 4)], [(5, 4), (5, 6), (5, 5)]])
def test_regression_needs_spread(pairs):
    with pytest.raises(ValueError):
        area_regression(pairs)


def report(region, all_counts, large_counts, small_counts, pairs=()):
    rows = {
        SizeClass.ALL: RateRow(SizeClass.ALL, *all_counts, region=region),
        SizeClass.LARGE: RateRow(SizeClass.LARGE, *large_counts, region=region),
        SizeClass.SMALL: RateRow(SizeClass.SMALL, *small_counts, region=region),
    }
    return MetricsReport(region, rows, None, list(pairs))


def test_aggregate_sums_counts():
    first = report("a", (10, 8, 6), (6, 5, 4), (4, 3, 2), [(10, 9), (20, 17)])
    second = report("b", (5, 4, 3), (3, 2, 2), (2, 2, 1), [(30, 25)])
    total = aggregate([first, second])
    counts = {
        name: (row.total_actual, row.total_predicted, row.true_positives)
        for name, row in total.rows.items()
    }
    assert counts == {
        SizeClass.ALL: (15, 12, 9),
        SizeClass.LARGE: (9, 7, 6),
        SizeClass.SMALL: (6, 5, 3),
    }
    assert total.region == "total"
    assert total[SizeClass.ALL].region == "total"
    assert len(total.area_pairs) == 3
    assert total.area_fit is not None and total.area_fit.n_pairs == 3


def test_format_table():
    first = report("a", (100, 61, 59), (59, 50, 46), (41, 11, 11), [(4, 5), (9, 8)])
    lines = format_table([first]).splitlines()
    assert lines[0].startswith("Region")
    assert "TPR %" in lines[0] and "FDR %" in lines[0]
    assert set(lines[1]) <= {"-", " "}
    assert "59.00" in lines[2] and "3.28" in lines[2]
    assert "> 0.5 m2" in lines[3] and "77.97" in lines[3]
    assert len(lines) == 4
    assert not any("area slope" in line for line in lines)
