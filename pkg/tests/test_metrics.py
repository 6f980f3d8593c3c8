from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatrack.metrics import (
    TAPVID_THRESHOLDS,
    MetricError,
    TrackPair,
    average_jaccard,
    delta_avg,
    epe,
    evaluate,
    mte,
    occlusion_accuracy,
    pairs_from_json,
    survival,
)


def pair_with_errors(errors, gt_visible=None, pred_visible=None, valid=None, dim=2):
    """Track whose prediction sits ``errors[t]`` to the right of a zero ground truth."""
    errors = np.asarray(errors, dtype=float)
    n = len(errors)
    gt = np.zeros((n, dim))
    pred = gt.copy()
    pred[:, 0] = errors
    ones = np.ones(n, dtype=bool)
    return TrackPair(pred, gt,
                     ones if gt_visible is None else gt_visible,
                     ones if pred_visible is None else pred_visible,
                     ones if valid is None else valid)


def fraction_aj(errors, gt_vis, pred_vis, thresholds):
    """Exact-arithmetic AJ straight from the definition."""
    n_gt = sum(gt_vis)
    total = Fraction(0)
    for h in thresholds:
        tp = sum(1 for e, g, p in zip(errors, gt_vis, pred_vis) if p and g and e <= h)
        fp = sum(1 for p in pred_vis if p) - tp
        total += Fraction(tp, n_gt + fp)
    return total / len(thresholds) * 100


# --- delta_avg --------------------------------------------------------------------------

def test_delta_avg_examples():
    assert delta_avg([pair_with_errors([0, 0, 0])]) == 100.0
    assert delta_avg([pair_with_errors([3.0] * 4)]) == pytest.approx(60.0, abs=1e-12)
    assert delta_avg([pair_with_errors([100.0] * 4)]) == 0.0


def test_delta_avg_boundary_and_strict():
    p = [pair_with_errors([4.0])]
    assert delta_avg(p, (4.0,)) == 100.0
    assert delta_avg(p, (4.0,), strict=True) == 0.0


def test_delta_avg_ignores_occluded_and_invalid_frames():
    p = pair_with_errors([0.0, 50, 50], gt_visible=[True, False, True], valid=[True, True, False])
    assert delta_avg([p]) == 100.0


def test_delta_avg_errors():
    with pytest.raises(MetricError):
        delta_avg([pair_with_errors([1.0])], ())
    with pytest.raises(MetricError):
        delta_avg([pair_with_errors([1.0], gt_visible=[False])])
    with pytest.raises(MetricError):
        delta_avg([])


# --- mte, survival, occlusion, epe -----------------------------------------------------------

def test_mte_examples():
    assert mte([pair_with_errors([0.0, 0.0])]) == 0.0
    assert mte([pair_with_errors([1.0, 2.0, 3.0])]) == 2.0
    assert mte([pair_with_errors([1.0, 3.0])]) == 2.0
    with pytest.raises(MetricError):
        mte([pair_with_errors([1.0], valid=[False])])


def test_survival_examples():
    assert survival([pair_with_errors([0.0] * 3)]) == 100.0
    assert survival([pair_with_errors([20.0, 5.0, 20.0, 5.0])], 16.0) == 50.0
    assert survival([pair_with_errors([0.5, 2.0])], 0.0) == 0.0
    assert survival([pair_with_errors([16.0])], 16.0) == 0.0


def test_occlusion_accuracy_examples():
    flags = np.array([True, False, True, True])
    assert occlusion_accuracy([pair_with_errors([0] * 4, flags, flags)]) == 100.0
    assert occlusion_accuracy([pair_with_errors([0] * 4, flags, ~flags)]) == 0.0
    assert occlusion_accuracy([pair_with_errors([0] * 4, flags, [True, False, True, False])]) == 75.0
    # invalid frames do not count
    assert occlusion_accuracy([pair_with_errors([0] * 4, flags, ~flags, valid=[True, False, False, False])]) == 0.0


def test_epe_examples():
    assert epe([pair_with_errors([0.0, 0.0], dim=3)]) == 0.0
    assert epe([pair_with_errors([0.1] * 5, dim=3)]) == pytest.approx(0.1, abs=1e-15)
    assert epe([pair_with_errors([0.1, 0.3], dim=3)]) == pytest.approx(0.2, abs=1e-15)


# --- average jaccard ---------------------------------------------------------------------------

def test_average_jaccard_examples():
    assert average_jaccard([pair_with_errors([0.0] * 3)]) == 100.0
    assert average_jaccard([pair_with_errors([3.0])]) == pytest.approx(60.0, abs=1e-12)
    hidden = pair_with_errors([0.0] * 3, pred_visible=np.zeros(3, bool))
    assert average_jaccard([hidden]) == 0.0
    with pytest.raises(MetricError):
        average_jaccard([pair_with_errors([1.0], gt_visible=[False])])


def two_track_example():
    # track a: always visible; the last frame is predicted occluded (a miss)
    a = pair_with_errors([0.5, 3.0, 10.0, 20.0], pred_visible=[True, True, True, False])
    # track b: occluded from frame 2, but frame 2 is predicted visible (an occlusion mistake)
    b = pair_with_errors([1.5, 0.5, 0.0, 0.0], gt_visible=[True, True, False, False],
                         pred_visible=[True, True, True, False])
    return [a, b]


def test_two_track_worked_example():
    pairs = two_track_example()
    # GT-visible points: a0..a3 and b0, b1 (6). Predicted visible: a0, a1, a2, b0, b1, b2 (6).
    # h=1: TP {a0, b1} -> 2/(6+4); h=2: +b0 -> 3/(6+3); h=4, h=8: +a1 -> 4/(6+2);
    # h=16: +a2 -> 5/(6+1). Mean = (1/5 + 1/3 + 1/2 + 1/2 + 5/7) / 5 = 236/525.
    assert average_jaccard(pairs) == pytest.approx(100 * 236 / 525, abs=1e-12)
    # distance metrics over the 6 GT-visible points: errors 0.5, 3, 10, 20, 1.5, 0.5
    assert delta_avg(pairs) == pytest.approx(60.0, abs=1e-12)  # (2+3+4+4+5)/30
    assert mte(pairs) == pytest.approx(2.25)  # centre of 0.5, 0.5, 1.5, 3, 10, 20
    assert survival(pairs) == pytest.approx(500 / 6)
    assert occlusion_accuracy(pairs) == 75.0  # a3 and b2 wrong out of 8


def test_two_track_example_matches_exact_oracle():
    errors = [0.5, 3.0, 10.0, 20.0, 1.5, 0.5, 0.0, 0.0]
    gt_vis = [True] * 6 + [False] * 2
    pred_vis = [True, True, True, False, True, True, True, False]
    assert average_jaccard(two_track_example()) == pytest.approx(
        float(fraction_aj(errors, gt_vis, pred_vis, TAPVID_THRESHOLDS)), abs=1e-12)


def random_pairs(rng, n_tracks=3, frames=6):
    out = []
    for _ in range(n_tracks):
        gt = rng.uniform(0, 50, (frames, 2))
        pred = gt + rng.exponential(4.0, (frames, 2)) * rng.choice([-1, 1], (frames, 2))
        gv = rng.random(frames) < 0.7
        gv[0] = True
        out.append(TrackPair(pred, gt, gv, rng.random(frames) < 0.7, np.ones(frames, bool)))
    return out


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 4), st.floats(0.01, 20))
def test_average_jaccard_properties(seed, which, grow):
    rng = np.random.default_rng(seed)
    pairs = random_pairs(rng)
    aj = average_jaccard(pairs)
    assert 0.0 <= aj <= 100.0
    assert aj <= delta_avg(pairs) + 1e-9
    larger = list(TAPVID_THRESHOLDS)
    larger[which] += grow
    assert average_jaccard(pairs, tuple(larger)) >= aj - 1e-9
    assert delta_avg(pairs, tuple(larger)) >= delta_avg(pairs) - 1e-9
    assert average_jaccard(pairs[::-1]) == pytest.approx(aj, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_ranges_and_exact_oracle(seed):
    rng = np.random.default_rng(seed)
    pairs = random_pairs(rng)
    for value in (delta_avg(pairs), survival(pairs), occlusion_accuracy(pairs)):
        assert 0.0 <= value <= 100.0
    assert mte(pairs) >= 0 and epe(pairs) >= 0
    errors = np.concatenate([p.errors for p in pairs])
    gv = np.concatenate([p.gt_visible for p in pairs])
    pv = np.concatenate([p.pred_visible for p in pairs])
    assert average_jaccard(pairs) == pytest.approx(float(fraction_aj(errors, gv, pv, TAPVID_THRESHOLDS)),
                                                   abs=1e-9)


# --- track files -------------------------------------------------------------------------------

def track_doc(points):
    return {"query": {"x": 0, "y": 0, "t": 0}, "points": [
        {"t": t, "x": x, "y": y, "X": x / 100, "Y": y / 100, "Z": 1.0, "visible": v} for t, x, y, v in points]}


def test_json_pairs_and_evaluate():
    gt = {"frames": 3, "tracks": [track_doc([(0, 1, 1, True), (1, 2, 1, True), (2, 3, 1, False)])]}
    perfect = evaluate(gt, gt)
    assert perfect["delta_avg_2d"] == perfect["average_jaccard"] == perfect["occlusion_accuracy"] == 100.0
    assert perfect["mte_2d"] == 0.0 and perfect["survival_3d"] == 100.0
    iphone = evaluate(gt, gt, "iphone")
    assert iphone["epe"] == 0.0 and iphone["delta_05_3d"] == 100.0

    pred = {"tracks": [track_doc([(1, 2, 4, True)])]}  # frames 0 and 2 missing
    p = pairs_from_json(pred, gt)[0]
    assert np.isinf(p.errors[0]) and p.errors[1] == 3.0
    np.testing.assert_array_equal(p.pred_visible, [False, True, False])
    assert evaluate(pred, gt)["occlusion_accuracy"] == pytest.approx(200 / 3)

    with pytest.raises(MetricError):
        evaluate({"tracks": []}, gt)
    with pytest.raises(MetricError):
        evaluate(gt, gt, "davis")
    unserved = evaluate({"tracks": [None]}, gt)
    assert unserved["delta_avg_2d"] == 0.0 and unserved["average_jaccard"] == 0.0
