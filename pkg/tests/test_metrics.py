import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelsl.metrics import (
    DepthMap,
    DisparityMap,
    depth_to_disparity,
    disparity_to_depth,
    evaluate,
    mae_depth,
    outlier_percentage,
)

FX, B = 1181.76, 209.39


def dm(a, valid=None):
    a = np.asarray(a, dtype=np.float64)
    return DepthMap(a, np.ones(a.shape, bool) if valid is None else np.asarray(valid))


def disp(a, valid=None):
    a = np.asarray(a, dtype=np.float64)
    return DisparityMap(a, np.ones(a.shape, bool) if valid is None else np.asarray(valid))


def mae_substituted_loop(est, est_valid, gt, gt_valid, t):
    """Scalar-loop oracle for the outlier-substituted MAE."""
    vals = [e for e, v in zip(est.ravel(), est_valid.ravel()) if v]
    fill = sum(vals) / len(vals)
    total, n = 0.0, 0
    for e, ev, g, gv in zip(est.ravel(), est_valid.ravel(), gt.ravel(), gt_valid.ravel()):
        if not gv:
            continue
        if not ev or abs(FX * B / e - FX * B / g) > t:
            e = fill
        total += abs(e - g)
        n += 1
    return total / n


def test_disparity_at_one_meter():
    d = depth_to_disparity(dm([[1000.0]]), FX, B)
    assert d.disp[0, 0] == pytest.approx(247.45, abs=0.01)
    assert d.disp[0, 0] == pytest.approx(FX * B / 1000.0, rel=1e-15)


def test_doubling_depth_halves_disparity():
    a = depth_to_disparity(dm([[500.0, 800.0]]), FX, B).disp
    b = depth_to_disparity(dm([[1000.0, 1600.0]]), FX, B).disp
    np.testing.assert_allclose(b, a / 2, rtol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(1.0, 500.0))
def test_round_trip(d):
    x = disp([[d]])
    back = depth_to_disparity(disparity_to_depth(x, FX, B), FX, B)
    assert abs(back.disp[0, 0] - d) <= 1e-9 * d


def test_invalid_pixels_stay_invalid():
    d = depth_to_disparity(DepthMap.from_array([[1000.0, 0.0, np.nan]]), FX, B)
    np.testing.assert_array_equal(d.valid, [[True, False, False]])
    assert d.disp[0, 1] == 0.0


@pytest.mark.parametrize("fx,b", [(0.0, 1.0), (1.0, -2.0)])
def test_conversion_rejects_bad_rig(fx, b):
    with pytest.raises(ValueError):
        depth_to_disparity(dm([[1.0]]), fx, b)
    with pytest.raises(ValueError):
        disparity_to_depth(disp([[1.0]]), fx, b)


def test_mae_examples():
    gt = dm(np.full((3, 4), 1000.0))
    assert mae_depth(gt, gt) == 0.0
    assert mae_depth(dm(gt.depth + 5.0), gt) == pytest.approx(5.0, abs=1e-12)


def test_mae_substitution_hand_computed():
    est = np.array([[1000.0, 1000.5], [0.0, 1300.0]])
    valid = np.array([[True, True], [False, True]])
    gt = np.array([[1000.0, 1000.0], [1100.0, 1200.0]])
    # 0.5 mm at 1 m is ~0.12 px; pixel (1,1) is ~20 px off and gets replaced by the mean
    fill = 3300.5 / 3
    expect = (0.0 + 0.5 + abs(fill - 1100.0) + abs(fill - 1200.0)) / 4
    got = mae_depth(dm(est, valid), dm(gt), 1.0, FX, B)
    assert got == pytest.approx(expect, abs=1e-12)
    assert got == pytest.approx(mae_substituted_loop(est, valid, gt, np.ones((2, 2), bool), 1.0), abs=1e-12)


def test_mae_substitution_matches_loop_oracle():
    rng = np.random.default_rng(0)
    gt = rng.uniform(600, 1500, (20, 30))
    est = gt + rng.normal(0, 8, gt.shape)
    est_valid = rng.random(gt.shape) > 0.1
    gt_valid = rng.random(gt.shape) > 0.2
    for t in (0.1, 0.5, 1.0):
        got = mae_depth(DepthMap(est, est_valid), DepthMap(gt, gt_valid), t, FX, B)
        assert got == pytest.approx(mae_substituted_loop(est, est_valid, gt, gt_valid, t), abs=1e-9)


def test_mae_translation_detecting():
    rng = np.random.default_rng(1)
    gt = rng.uniform(600, 1500, (10, 10))
    est = gt + rng.uniform(0, 20, gt.shape)
    base = mae_depth(dm(est), dm(gt))
    assert mae_depth(dm(est + 7.5), dm(gt)) - base == pytest.approx(7.5, abs=1e-9)


def test_mae_errors():
    with pytest.raises(ValueError):
        mae_depth(dm([[1.0]]), DepthMap(np.ones((1, 1)), np.zeros((1, 1), bool)))
    with pytest.raises(ValueError):
        mae_depth(dm(np.ones((2, 2))), dm(np.ones((2, 3))))
    with pytest.raises(ValueError):
        mae_depth(dm([[1.0]]), dm([[1.0]]), 1.0)


def test_outlier_examples():
    g = disp(np.full((4, 4), 100.0))
    for t in (0.1, 0.5, 1.0):
        assert outlier_percentage(g, g, t) == 0.0
    e = disp(g.disp + 0.2)
    assert outlier_percentage(e, g, 0.1) == 100.0
    assert outlier_percentage(e, g, 0.5) == 0.0
    half = g.disp.copy()
    half[:2] += 2.0
    assert outlier_percentage(disp(half), g, 1.0) == 50.0


def test_outlier_counts_invalid_estimates():
    g = disp(np.full((2, 2), 50.0))
    e = disp(g.disp, np.array([[True, False], [True, True]]))
    assert outlier_percentage(e, g, 1.0) == 25.0
    gv = disp(g.disp, np.array([[True, True], [False, False]]))
    assert outlier_percentage(e, gv, 1.0) == 50.0
    with pytest.raises(ValueError):
        outlier_percentage(g, g, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_outliers_non_increasing_in_threshold(seed):
    rng = np.random.default_rng(seed)
    g = disp(rng.uniform(50, 300, (8, 8)))
    e = disp(g.disp + rng.normal(0, 0.8, (8, 8)), rng.random((8, 8)) > 0.1)
    o = [outlier_percentage(e, g, t) for t in (0.1, 0.5, 1.0)]
    assert o[0] >= o[1] >= o[2]


def test_evaluate_report():
    gt = dm(np.full((5, 5), 1000.0))
    rep = evaluate(dm(gt.depth + 1.0), gt, FX, B)
    assert rep["mae_mm"] == 1.0 and rep["mae_substituted_mm"] == 1.0
    assert rep["valid_gt_pixels"] == 25
    assert set(rep) >= {"o(0.1)", "o(0.5)", "o(1)"}
    assert rep["o(1)"] == 0.0 and rep["o(0.1)"] == 100.0
