import numpy as np
import pytest
from hypothesis import given, strategies as st

from mrsyolo.evalkit import (COCO_THRESHOLDS, DetectionRecord, average_precision, evaluate, iou,
                             match, mean_ap, pr_curve)

R = DetectionRecord


def fixture_3_2():
    gts = [R("img", 0, (0, 0, 10, 10)), R("img", 0, (20, 20, 30, 30))]
    preds = [R("img", 0, (0, 0, 10, 10), 0.9), R("img", 0, (50, 50, 60, 60), 0.8),
             R("img", 0, (20, 20, 30, 30), 0.7)]
    return preds, gts


def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0
    assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == 1 / 3
    assert iou((0, 0, 0, 2), (0, 0, 2, 2)) == 0.0


def test_match_examples():
    g = [R("a", 0, (0, 0, 1, 1))]
    _, tp = match([R("a", 0, (0, 0, 1, 1), 0.5)], g)
    assert list(tp) == [True]
    order, tp = match([R("a", 0, (0, 0, 1, 1), 0.4), R("a", 0, (0, 0, 1, 1), 0.8)], g)
    assert order == [1, 0] and list(tp) == [True, False]
    preds, gts = fixture_3_2()
    assert list(match(preds, gts, 0.5)[1]) == [True, False, True]


def test_fixture_ap():
    preds, gts = fixture_3_2()
    curve = pr_curve(preds, gts)
    np.testing.assert_allclose(curve.recall, [0.5, 0.5, 1.0])
    np.testing.assert_allclose(curve.precision, [1.0, 0.5, 2 / 3])
    assert abs(average_precision(curve) - 0.8333) <= 1e-4
    assert np.all(curve.tp + curve.fn == 2)


def test_ap_trivial_cases():
    g = [R("a", 0, (0, 0, 1, 1))]
    assert average_precision(pr_curve([R("a", 0, (0, 0, 1, 1), 0.9)], g)) == 1.0
    assert average_precision(pr_curve([R("a", 0, (5, 5, 6, 6), 0.9)], g)) == 0.0
    with pytest.raises(ValueError):
        average_precision(pr_curve([R("a", 0, (0, 0, 1, 1), 0.9)], []))


def test_map_examples():
    assert len(COCO_THRESHOLDS) == 10 and COCO_THRESHOLDS[0] == 0.5 and COCO_THRESHOLDS[-1] == 0.95
    preds, gts = fixture_3_2()
    assert mean_ap(preds, gts).map == pytest.approx(5 / 6)
    gts2 = gts + [R("img", 1, (0, 0, 4, 4)), R("img", 1, (10, 0, 14, 4))]
    preds2 = preds + [R("img", 1, (0, 0, 4, 4), 0.9)]
    res = mean_ap(preds2, gts2)
    assert res.ap[1][0] == 0.5
    assert res.map == pytest.approx((5 / 6 + 0.5) / 2)
    gts3 = [R("a", 0, (0, 0, 1, 1)), R("a", 1, (0, 0, 1, 1))]
    preds3 = [R("a", 0, (0, 0, 1, 1), 0.9), R("a", 1, (0, 0, 1, 1), 0.9), R("a", 1, (3, 3, 4, 4), 0.95)]
    assert mean_ap(preds3, gts3).map == pytest.approx(0.75)


def test_classes_without_gt_are_skipped():
    gts = [R("a", 0, (0, 0, 1, 1))]
    preds = [R("a", 0, (0, 0, 1, 1), 0.9), R("a", 7, (0, 0, 1, 1), 0.9)]
    out = evaluate(preds, gts)
    assert out["skipped_classes"] == [7]
    assert out["map50"] == 1.0
    with pytest.raises(ValueError):
        mean_ap(preds, [])
    with pytest.raises(ValueError):
        mean_ap(preds, gts, thresholds=())


def test_record_validation():
    with pytest.raises(ValueError):
        R("a", 0, (2, 0, 1, 1))
    with pytest.raises(ValueError):
        R("a", 0, (0, 0, 1, 1), 1.5)
    r = R("a", 3, (0, 0, 1, 2), 0.25)
    assert R.from_json(r.to_json()) == r


# ---- brute-force oracle ------------------------------------------------------

def oracle_ap(preds, gts, thr):
    """Enumerate every score cut; at each cut rerun matching from scratch."""
    scores = sorted({p.score for p in preds}, reverse=True)
    points = []
    for cut in scores:
        kept = sorted([p for p in preds if p.score >= cut], key=lambda p: -p.score)
        used, tp = set(), 0
        for p in kept:
            cands = [(iou(p.box, g.box), -j) for j, g in enumerate(gts)
                     if g.image_id == p.image_id and j not in used]
            if cands:
                v, negj = max(cands)
                if v >= thr:
                    used.add(-negj)
                    tp += 1
        points.append((tp / len(gts), tp / len(kept)))
    ap, prev_r = 0.0, 0.0
    for k, (r, _) in enumerate(points):
        ap += (r - prev_r) * max(p for _, p in points[k:])
        prev_r = r
    return ap


boxes = st.tuples(st.integers(0, 8), st.integers(0, 8), st.integers(1, 4), st.integers(1, 4)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@st.composite
def cases(draw):
    gts = [R(draw(st.sampled_from("ab")), 0, b) for b in draw(st.lists(boxes, min_size=1, max_size=4))]
    n = draw(st.integers(0, 6))
    scores = draw(st.lists(st.floats(0.01, 1.0), min_size=n, max_size=n, unique=True))
    preds = [R(draw(st.sampled_from("ab")), 0, draw(boxes), s) for s in scores]
    return preds, gts


@given(cases())
def test_evaluator_matches_all_cuts_oracle(case):
    preds, gts = case
    for thr in (0.5, 0.75):
        ap = average_precision(pr_curve(preds, gts, thr))
        assert ap == pytest.approx(oracle_ap(preds, gts, thr), abs=1e-12)


def test_twenty_seeded_cases_match_oracle():
    rng = np.random.default_rng(20)
    for _ in range(20):
        def box():
            x, y = rng.integers(0, 8, 2)
            w, h = rng.integers(1, 5, 2)
            return (x, y, x + w, y + h)
        gts = [R(str(rng.integers(2)), 0, box()) for _ in range(rng.integers(1, 5))]
        preds = [R(str(rng.integers(2)), 0, box(), float(s))
                 for s in rng.permutation(np.linspace(0.05, 0.95, rng.integers(1, 8)))]
        ap = average_precision(pr_curve(preds, gts, 0.5))
        assert ap == pytest.approx(oracle_ap(preds, gts, 0.5), abs=1e-12)


@given(cases())
def test_pr_bounds_and_counts(case):
    preds, gts = case
    c = pr_curve(preds, gts)
    assert np.all((c.precision >= 0) & (c.precision <= 1))
    assert np.all((c.recall >= 0) & (c.recall <= 1))
    assert np.all(np.diff(c.recall) >= 0)
    assert np.array_equal(c.tp + c.fp, np.arange(1, len(preds) + 1))
    env = c.envelope()
    assert np.all(np.diff(env) <= 0)


@given(cases(), st.sampled_from(["sq", "exp", "affine"]))
def test_ap_invariant_under_monotone_rescale(case, kind):
    preds, gts = case
    f = {"sq": lambda s: s * s, "exp": lambda s: np.exp(s) / np.e, "affine": lambda s: 0.5 * s + 0.1}[kind]
    moved = [R(p.image_id, p.class_id, p.box, float(f(p.score))) for p in preds]
    assert average_precision(pr_curve(preds, gts)) == average_precision(pr_curve(moved, gts))
