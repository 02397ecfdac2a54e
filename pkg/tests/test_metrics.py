import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_confusion, brute_iou, brute_mean_iou
from segmerge.errors import SegmergeError
from segmerge.metrics import (
    ConfusionMatrix,
    accumulate,
    domain_exclusivity,
    exclusivity_counts,
    format_percent,
    iou_per_class,
    iou_report,
    mean_iou,
    merge_confusions,
    per_domain_report,
    report_table,
)
from segmerge.raster import AnnotationRaster
from segmerge.taxonomy import UNIVERSAL


def _u(ids):
    return AnnotationRaster(ids=np.asarray(ids, dtype=np.uint8), space=UNIVERSAL)


def _random_pair(rng, k, shape, ignore_fraction=0.2):
    gt = rng.integers(0, k, size=shape).astype(np.uint8)
    pred = rng.integers(0, k, size=shape).astype(np.uint8)
    gt[rng.random(shape) < ignore_fraction] = 255
    return _u(gt), _u(pred)


# ------------------------------------------------------- matrix plumbing


def test_zero_matrix_is_empty():
    m = ConfusionMatrix.zero(4)
    assert m.k == 4
    assert m.counts.shape == (4, 4)
    assert int(m.counts.sum()) == 0


def test_matrix_shape_is_checked():
    with pytest.raises(SegmergeError, match="k x k"):
        ConfusionMatrix(k=3, counts=np.zeros((3, 2), dtype=np.int64))


def test_matrix_counts_are_frozen():
    m = ConfusionMatrix.zero(2)
    with pytest.raises(ValueError):
        m.counts[0, 0] = 1


# ------------------------------------------------------------ accumulate


def test_accumulate_hand_case():
    m = accumulate(ConfusionMatrix.zero(2), _u([[0, 0], [1, 1]]), _u([[0, 1], [1, 1]]))
    assert m.counts.tolist() == [[1, 1], [0, 2]]


def test_accumulate_perfect_prediction_is_diagonal():
    gt = _u([[0, 1, 2], [2, 1, 0]])
    m = accumulate(ConfusionMatrix.zero(3), gt, gt)
    assert m.counts.tolist() == [[2, 0, 0], [0, 2, 0], [0, 0, 2]]


def test_accumulate_skips_ignore_pixels():
    m = accumulate(ConfusionMatrix.zero(2), _u([[0, 255]]), _u([[1, 1]]))
    assert m.counts.tolist() == [[0, 1], [0, 0]]
    assert int(m.counts.sum()) == 1


def test_prediction_under_ignore_is_not_judged():
    # the prediction there may hold anything, even an out-of-range id
    m = accumulate(ConfusionMatrix.zero(2), _u([[255, 255]]), _u([[200, 255]]))
    assert int(m.counts.sum()) == 0


def test_accumulate_dimension_mismatch():
    with pytest.raises(SegmergeError, match="dimension mismatch"):
        accumulate(ConfusionMatrix.zero(2), _u([[0, 1]]), _u([[0], [1]]))


def test_accumulate_rejects_out_of_range_ground_truth():
    with pytest.raises(SegmergeError, match="ground-truth id out of range"):
        accumulate(ConfusionMatrix.zero(2), _u([[5]]), _u([[0]]))


def test_accumulate_rejects_out_of_range_prediction():
    with pytest.raises(SegmergeError, match="prediction id 7 out of range for k=3"):
        accumulate(ConfusionMatrix.zero(3), _u([[1]]), _u([[7]]))


def test_accumulate_requires_universal_rasters():
    native = AnnotationRaster(ids=np.zeros((1, 1), dtype=np.uint8), space="cityscapes")
    with pytest.raises(SegmergeError, match="ground-truth raster"):
        accumulate(ConfusionMatrix.zero(2), native, _u([[0]]))
    with pytest.raises(SegmergeError, match="prediction raster"):
        accumulate(ConfusionMatrix.zero(2), _u([[0]]), native)


def test_accumulate_matches_brute_force_tally():
    rng = np.random.default_rng(7)
    for _ in range(25):
        gt, pred = _random_pair(rng, 11, (13, 9))
        m = accumulate(ConfusionMatrix.zero(11), gt, pred)
        expected = brute_confusion(gt.ids, pred.ids, 11)
        assert np.array_equal(m.counts, expected)


def test_accumulate_is_order_independent():
    rng = np.random.default_rng(3)
    pairs = [_random_pair(rng, 5, (6, 6)) for _ in range(12)]

    def fold(sequence):
        m = ConfusionMatrix.zero(5)
        for gt, pred in sequence:
            m = accumulate(m, gt, pred)
        return m

    assert np.array_equal(fold(pairs).counts, fold(pairs[::-1]).counts)


# ----------------------------------------------------------------- merge


def test_merged_partitions_equal_sequential():
    rng = np.random.default_rng(11)
    pairs = [_random_pair(rng, 6, (8, 8)) for _ in range(20)]
    total = ConfusionMatrix.zero(6)
    for gt, pred in pairs:
        total = accumulate(total, gt, pred)

    # three unequal worker shards, merged pairwise
    shards = [pairs[:5], pairs[5:6], pairs[6:]]
    merged = ConfusionMatrix.zero(6)
    for shard in shards:
        part = ConfusionMatrix.zero(6)
        for gt, pred in shard:
            part = accumulate(part, gt, pred)
        merged = merge_confusions(merged, part)
    assert np.array_equal(merged.counts, total.counts)


def test_merge_is_commutative():
    rng = np.random.default_rng(2)
    a = accumulate(ConfusionMatrix.zero(4), *_random_pair(rng, 4, (5, 5)))
    b = accumulate(ConfusionMatrix.zero(4), *_random_pair(rng, 4, (5, 5)))
    assert np.array_equal(merge_confusions(a, b).counts, merge_confusions(b, a).counts)


def test_merge_size_mismatch():
    with pytest.raises(SegmergeError, match="size 2 and 3"):
        merge_confusions(ConfusionMatrix.zero(2), ConfusionMatrix.zero(3))


# ------------------------------------------------------------------- IoU


def test_iou_hand_case():
    # gt [0,0,1,1] vs pred [0,1,1,1]: class 0 = 1/2, class 1 = 2/3
    m = accumulate(ConfusionMatrix.zero(2), _u([[0, 0, 1, 1]]), _u([[0, 1, 1, 1]]))
    per_class = iou_per_class(m)
    assert per_class[0] == pytest.approx(0.5, abs=1e-12)
    assert per_class[1] == pytest.approx(2 / 3, abs=1e-12)
    assert mean_iou(m) == pytest.approx(7 / 12, abs=1e-12)


def test_iou_of_perfect_prediction_is_one():
    gt = _u([[0, 1, 2, 255]])
    m = accumulate(ConfusionMatrix.zero(3), gt, gt)
    assert iou_per_class(m) == {0: 1.0, 1: 1.0, 2: 1.0}
    assert mean_iou(m) == 1.0


def test_unseen_class_has_no_iou():
    m = accumulate(ConfusionMatrix.zero(5), _u([[0, 1]]), _u([[0, 1]]))
    per_class = iou_per_class(m)
    assert set(per_class) == {0, 1}
    assert 2 not in per_class


def test_iou_matches_brute_force():
    rng = np.random.default_rng(23)
    for _ in range(20):
        gt, pred = _random_pair(rng, 9, (10, 10))
        m = accumulate(ConfusionMatrix.zero(9), gt, pred)
        expected = brute_iou(m.counts.tolist())
        got = iou_per_class(m)
        assert set(got) == set(expected)
        for c, value in expected.items():
            assert got[c] == pytest.approx(value, abs=1e-12)
        assert mean_iou(m) == pytest.approx(brute_mean_iou(m.counts.tolist()), abs=1e-12)


def test_mean_iou_subset_restricts_average():
    m = accumulate(ConfusionMatrix.zero(3), _u([[0, 0, 1, 1]]), _u([[0, 1, 1, 1]]))
    assert mean_iou(m, subset={0}) == pytest.approx(0.5, abs=1e-12)
    assert mean_iou(m, subset={1}) == pytest.approx(2 / 3, abs=1e-12)
    # classes without a defined IoU fall out of the subset silently
    assert mean_iou(m, subset={0, 2}) == pytest.approx(0.5, abs=1e-12)


def test_mean_iou_with_no_defined_class_is_an_error():
    with pytest.raises(SegmergeError, match="no class with a defined IoU"):
        mean_iou(ConfusionMatrix.zero(3))
    m = accumulate(ConfusionMatrix.zero(3), _u([[0]]), _u([[0]]))
    with pytest.raises(SegmergeError, match="no class with a defined IoU"):
        mean_iou(m, subset={2})


def test_iou_report_is_self_consistent():
    rng = np.random.default_rng(5)
    gt, pred = _random_pair(rng, 7, (12, 12))
    report = iou_report(accumulate(ConfusionMatrix.zero(7), gt, pred))
    assert report.evaluated_classes == frozenset(report.per_class)
    expected = sum(report.per_class.values()) / len(report.per_class)
    assert report.mean_iou == pytest.approx(expected, abs=1e-12)


def test_duplicating_every_pair_leaves_iou_unchanged():
    rng = np.random.default_rng(17)
    pairs = [_random_pair(rng, 6, (9, 9)) for _ in range(8)]
    once = ConfusionMatrix.zero(6)
    twice = ConfusionMatrix.zero(6)
    for gt, pred in pairs:
        once = accumulate(once, gt, pred)
        twice = accumulate(accumulate(twice, gt, pred), gt, pred)
    a, b = iou_per_class(once), iou_per_class(twice)
    assert set(a) == set(b)
    for c in a:
        assert a[c] == pytest.approx(b[c], abs=1e-12)


def test_extra_all_ignore_rasters_change_nothing():
    rng = np.random.default_rng(29)
    gt, pred = _random_pair(rng, 6, (9, 9))
    base = accumulate(ConfusionMatrix.zero(6), gt, pred)
    blank = _u(np.full((4, 4), 255, dtype=np.uint8))
    noisy = accumulate(base, blank, _u(rng.integers(0, 6, (4, 4)).astype(np.uint8)))
    assert np.array_equal(base.counts, noisy.counts)


@st.composite
def confusion_matrices(draw):
    k = draw(st.integers(min_value=2, max_value=6))
    cells = draw(
        st.lists(st.integers(min_value=0, max_value=40), min_size=k * k, max_size=k * k)
    )
    return ConfusionMatrix(k=k, counts=np.array(cells, dtype=np.int64).reshape(k, k))


@settings(max_examples=150, deadline=None)
@given(confusion_matrices())
def test_iou_stays_in_unit_interval(m):
    per_class = iou_per_class(m)
    for c, value in per_class.items():
        assert 0.0 <= value <= 1.0
        # IoU hits 1 exactly when the class never leaks in either direction
        off_diagonal = (
            int(m.counts[c].sum()) + int(m.counts[:, c].sum()) - 2 * int(m.counts[c, c])
        )
        assert (value == 1.0) == (off_diagonal == 0 and m.counts[c, c] > 0)


# ----------------------------------------------------------- exclusivity


def test_exclusivity_all_pixels_inside():
    assert domain_exclusivity(_u([[19, 20], [26, 19]]), frozenset(range(19, 27))) == 1.0


def test_exclusivity_half_inside():
    pred = _u([[19, 20], [0, 11]])
    assert domain_exclusivity(pred, frozenset(range(19, 27))) == 0.5


def test_exclusivity_skips_ignore_pixels():
    pred = _u([[19, 255], [255, 3]])
    inside, evaluated = exclusivity_counts(pred, frozenset({19}))
    assert (inside, evaluated) == (1, 2)
    assert domain_exclusivity(pred, frozenset({19})) == 0.5


def test_exclusivity_of_all_ignore_prediction_is_an_error():
    pred = _u(np.full((2, 2), 255, dtype=np.uint8))
    with pytest.raises(SegmergeError, match="no non-ignore pixel"):
        domain_exclusivity(pred, frozenset({0}))


def test_exclusivity_counts_aggregate_as_integers():
    reachable = frozenset({0, 1})
    preds = [_u([[0, 1, 2, 255]]), _u([[2, 2], [0, 0]])]
    inside = evaluated = 0
    for pred in preds:
        i, e = exclusivity_counts(pred, reachable)
        inside += i
        evaluated += e
    assert (inside, evaluated) == (4, 7)


# ----------------------------------------------------- per-domain report


def _self_eval_confusions(space63):
    """Perfect predictions over a handful of reachable classes per dataset."""
    confusions = {}
    for ds in ("cityscapes", "suim", "sun_rgbd"):
        ids = sorted(space63.reachable(ds))[:4]
        gt = _u(np.array([ids, ids], dtype=np.uint8))
        confusions[ds] = accumulate(ConfusionMatrix.zero(len(space63.classes)), gt, gt)
    return confusions


def test_per_domain_self_evaluation_is_all_ones(space63):
    report = per_domain_report(_self_eval_confusions(space63), space63)
    assert report["averaging"] == "reachable-classes"
    assert sorted(report["datasets"]) == ["cityscapes", "suim", "sun_rgbd"]
    for entry in report["datasets"].values():
        assert entry["miou"] == 1.0
        assert all(v == 1.0 for v in entry["per_class"].values())
        assert sorted(entry["per_class"]) == sorted(entry["evaluated_classes"])


def test_shared_person_class_appears_for_both_contributors(space63):
    person = next(c for c in space63.classes if c.name == "person")
    k = len(space63.classes)
    confusions = {}
    for ds in ("cityscapes", "sun_rgbd", "suim"):
        ids = sorted(space63.reachable(ds))[:3]
        if ds != "suim":
            ids.append(person.id)
        gt = _u(np.array([ids], dtype=np.uint8))
        confusions[ds] = accumulate(ConfusionMatrix.zero(k), gt, gt)
    report = per_domain_report(confusions, space63)
    # one universal class, reported under each contributing dataset
    assert report["datasets"]["cityscapes"]["per_class"]["person"] == 1.0
    assert report["datasets"]["sun_rgbd"]["per_class"]["person"] == 1.0
    assert "person" not in report["datasets"]["suim"]["per_class"]


def test_person_iou_one_third_under_symmetric_errors(space63):
    # equal pixel counts, errors in one direction each way:
    # one true person kept, one lost to road, one road pixel claimed
    person = next(c.id for c in space63.classes if c.name == "person")
    road = next(c.id for c in space63.classes if c.name == "road")
    gt = _u([[person, person, road, road]])
    pred = _u([[person, road, person, road]])
    m = accumulate(ConfusionMatrix.zero(len(space63.classes)), gt, pred)
    report = per_domain_report({"cityscapes": m}, space63)
    assert report["datasets"]["cityscapes"]["per_class"]["person"] == 1 / 3


def test_out_of_domain_predictions_still_penalise(space63):
    # cityscapes ground truth predicted as a suim-only class: the miss is
    # charged to the true class, the foreign class stays out of the average
    road = next(c.id for c in space63.classes if c.name == "road")
    waterbody = next(c.id for c in space63.classes if c.name == "waterbody")
    gt = _u([[road, road]])
    pred = _u([[road, waterbody]])
    m = accumulate(ConfusionMatrix.zero(len(space63.classes)), gt, pred)
    report = per_domain_report({"cityscapes": m}, space63)
    entry = report["datasets"]["cityscapes"]
    assert entry["per_class"]["road"] == 0.5
    assert "waterbody" not in entry["per_class"]
    assert entry["miou"] == 0.5


def test_per_domain_rejects_empty_matrix(space63):
    k = len(space63.classes)
    with pytest.raises(SegmergeError, match="accumulated zero pixels"):
        per_domain_report({"cityscapes": ConfusionMatrix.zero(k)}, space63)


def test_per_domain_rejects_unknown_dataset(space63):
    k = len(space63.classes)
    m = accumulate(ConfusionMatrix.zero(k), _u([[0]]), _u([[0]]))
    with pytest.raises(SegmergeError, match="contributes no class"):
        per_domain_report({"kitti": m}, space63)


def test_per_domain_report_carries_exclusivity(space63):
    confusions = _self_eval_confusions(space63)
    exclusivity = {"cityscapes": 0.875, "suim": 1.0}
    report = per_domain_report(confusions, space63, exclusivity=exclusivity)
    assert report["datasets"]["cityscapes"]["exclusivity"] == 0.875
    assert report["datasets"]["suim"]["exclusivity"] == 1.0
    assert "exclusivity" not in report["datasets"]["sun_rgbd"]


# ---------------------------------------------------------- presentation


@pytest.mark.parametrize(
    ("value", "decimals", "expected"),
    [
        (26 / 37, 2, "70.27"),
        (26 / 37, 0, "70"),
        (1.0, 2, "100.00"),
        (7 / 12, 2, "58.33"),
        (0.5, 2, "50.00"),
        (0.0, 2, "0.00"),
        # exact ties round half up, not to even
        (0.125, 0, "13"),
        (0.375, 0, "38"),
        (0.0625, 1, "6.3"),
    ],
)
def test_format_percent(value, decimals, expected):
    assert format_percent(value, decimals) == expected


def test_report_table_layout(space63):
    report = per_domain_report(
        _self_eval_confusions(space63), space63, exclusivity={"suim": 1.0}
    )
    table = report_table(report, space63)
    lines = table.splitlines()
    assert lines[0].split() == ["dataset", "mIoU", "[%]", "exclusivity"]
    assert any(row.split()[:2] == ["cityscapes", "100.00"] for row in lines)
    assert any(row.split() == ["suim", "100.00", "1.0000"] for row in lines)

    # road is cityscapes-only: a value in one column, "-" in the others
    road_row = next(row for row in lines if row.startswith("road"))
    assert road_row.split()[1:] == ["100.00", "-", "-"]

    # classes absent everywhere are not printed at all
    assert not any(row.startswith("bag") for row in lines)
