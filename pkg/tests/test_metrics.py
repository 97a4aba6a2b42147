"""Metric tests against brute-force threshold enumeration and frozen values."""

import numpy as np
import pytest

from salfuse import metrics
from salfuse.errors import ValidationError


def brute_pr_f(pred, gt):
    """Oracle: loop over thresholds, build each mask elementwise, count."""
    g = gt.astype(bool)
    nf = int(g.sum())
    ps, rs, fs = [], [], []
    for t in range(256):
        m = (pred.astype(np.float64) * 255.0) >= float(t)
        tp = int((m & g).sum())
        mc = int(m.sum())
        p = tp / mc if mc > 0 else 0.0
        r = tp / nf
        den = 0.3 * p + r
        f = (1.0 + 0.3) * p * r / den if den > 0 else 0.0
        ps.append(p)
        rs.append(r)
        fs.append(f)
    return np.array(ps), np.array(rs), np.array(fs)


def brute_e_curve(pred, gt):
    """Oracle: per-pixel alignment matrix for every threshold."""
    g = gt.astype(np.float64)
    n = g.size
    out = []
    for t in range(256):
        m = ((pred.astype(np.float64) * 255.0) >= float(t)).astype(np.float64)
        if g.sum() in (0.0, n) or m.sum() in (0.0, n):
            out.append(1.0 - np.abs(m - g).mean())
            continue
        phi_g = g - g.mean()
        phi_m = m - m.mean()
        xi = 2.0 * phi_g * phi_m / (phi_g ** 2 + phi_m ** 2 + metrics.EPS)
        out.append(float((((xi + 1.0) ** 2) / 4.0).mean()))
    return np.array(out)


def random_mask(rng, h, w):
    # non-degenerate binary mask
    while True:
        m = (rng.random((h, w)) < rng.uniform(0.2, 0.8)).astype(np.float64)
        if 0 < m.sum() < m.size:
            return m


@pytest.mark.parametrize("seed", range(25))
def test_pr_f_bit_exact_vs_brute_force(seed):
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(4, 12)), int(rng.integers(4, 12))
    gt = random_mask(rng, h, w)
    # mix of arbitrary reals and exact threshold-grid values
    pred = rng.random((h, w))
    if seed % 2:
        pred = np.round(pred * 255.0) / 255.0
    precision, recall = metrics.pr_curve(pred, gt)
    f = metrics.f_measure_curve(precision, recall)
    bp, br, bf = brute_pr_f(pred, gt)
    assert np.array_equal(precision, bp)
    assert np.array_equal(recall, br)
    assert np.array_equal(f, bf)


@pytest.mark.parametrize("seed", range(10))
def test_e_curve_matches_per_pixel_oracle(seed):
    rng = np.random.default_rng(40 + seed)
    gt = random_mask(rng, 8, 8)
    pred = rng.random((8, 8))
    np.testing.assert_allclose(metrics.e_measure_curve(pred, gt), brute_e_curve(pred, gt), rtol=0, atol=1e-12)


def test_threshold_zero_keeps_everything_threshold_256_impossible():
    pred = np.zeros((4, 4))
    gt = np.eye(4)
    precision, recall = metrics.pr_curve(pred, gt)
    # t = 0: mask is all ones since 0 >= 0
    assert precision[0] == 4 / 16 and recall[0] == 1.0
    # t = 1: mask empty, precision defined as 0
    assert precision[1] == 0.0 and recall[1] == 0.0


def test_recall_is_non_increasing_in_threshold():
    rng = np.random.default_rng(9)
    for _ in range(10):
        gt = random_mask(rng, 10, 10)
        pred = rng.random((10, 10))
        _, recall = metrics.pr_curve(pred, gt)
        assert np.all(np.diff(recall) <= 0)


@pytest.mark.parametrize("seed", range(50))
def test_perfect_prediction_fixed_points(seed):
    rng = np.random.default_rng(1000 + seed)
    h, w = int(rng.integers(8, 33)), int(rng.integers(8, 33))
    gt = random_mask(rng, h, w)
    pred = gt.astype(np.float64)
    assert abs(metrics.s_measure(pred, gt) - 1.0) < 1e-9
    assert abs(metrics.e_measure_max(pred, gt) - 1.0) < 1e-9
    assert abs(metrics.f_measure_max(pred, gt) - 1.0) < 1e-9
    assert metrics.mae(pred, gt) == 0.0


def test_mae_hand_summation_and_symmetry():
    rng = np.random.default_rng(5)
    pred = rng.random((6, 7))
    gt = random_mask(rng, 6, 7)
    acc = 0.0
    for y in range(6):
        for x in range(7):
            acc += abs(pred[y, x] - gt[y, x])
    assert abs(metrics.mae(pred, gt) - acc / 42.0) < 1e-12
    # |pred - gt| is symmetric; binary "prediction" against binary gt
    assert metrics.mae(gt, pred.round()) == metrics.mae(pred.round(), gt)


def test_s_measure_frozen_small_case():
    # gt has one foreground pixel at the corner, prediction is flat 0.5:
    # object term 0.8, region term 1.0, mix at alpha 0.5 gives 0.9
    gt = np.array([[1.0, 0.0], [0.0, 0.0]])
    pred = np.full((2, 2), 0.5)
    assert abs(metrics.s_measure(pred, gt) - 0.9) < 1e-9


def test_s_measure_degenerate_conventions():
    pred = np.array([[0.2, 0.4], [0.6, 0.8]])
    assert abs(metrics.s_measure(pred, np.zeros((2, 2))) - (1.0 - 0.5)) < 1e-12
    assert abs(metrics.s_measure(pred, np.ones((2, 2))) - 0.5) < 1e-12
    assert metrics.s_measure(np.ones((2, 2)), np.zeros((2, 2))) == 0.0
    assert metrics.s_measure(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


def test_s_measure_alpha_changes_the_mix():
    gt = np.array([[1.0, 0.0], [0.0, 0.0]])
    pred = np.array([[0.9, 0.2], [0.1, 0.3]])
    a_half = metrics.s_measure(pred, gt, alpha=0.5)
    a_more_object = metrics.s_measure(pred, gt, alpha=0.7)
    assert abs(a_half - a_more_object) > 1e-6


def test_f_measure_beta_weighting():
    # P = 0.5, R = 1.0: with beta2 = 0.3 the value is 0.65 / 1.15 = 13/23;
    # with beta2 = 1 it is the harmonic mean 2/3
    p = np.array([0.5])
    r = np.array([1.0])
    f_def = metrics.f_measure_curve(p, r)
    f_sym = metrics.f_measure_curve(p, r, beta2=1.0)
    assert abs(f_def[0] - 13.0 / 23.0) < 1e-12
    assert abs(f_sym[0] - 2.0 / 3.0) < 1e-12
    assert f_def[0] != f_sym[0]


def test_f_measure_zero_denominator_is_zero():
    assert metrics.f_measure_curve(np.array([0.0]), np.array([0.0]))[0] == 0.0


def test_e_measure_inverted_prediction_scores_near_zero():
    rng = np.random.default_rng(12)
    gt = random_mask(rng, 8, 8)
    pred = 1.0 - gt
    curve = metrics.e_measure_curve(pred, gt)
    assert curve[128] < 1e-6


def test_e_measure_degenerate_gt():
    pred = np.array([[0.0, 1.0], [1.0, 1.0]])
    # all-background gt: every threshold falls back to 1 - mean|M - G|
    curve = metrics.e_measure_curve(pred, np.zeros((2, 2)))
    assert abs(curve[0] - 0.0) < 1e-12          # mask all ones
    assert abs(curve[200] - 0.25) < 1e-12       # mask = the three ones
    # all-foreground gt mirrors it
    curve = metrics.e_measure_curve(pred, np.ones((2, 2)))
    assert abs(curve[200] - 0.75) < 1e-12


def test_e_mean_variant_never_exceeds_max():
    rng = np.random.default_rng(3)
    for _ in range(5):
        gt = random_mask(rng, 8, 8)
        pred = rng.random((8, 8))
        assert metrics.e_measure_mean(pred, gt) <= metrics.e_measure_max(pred, gt)


def test_validation_rejects_bad_inputs():
    ok = np.zeros((4, 4))
    with pytest.raises(ValidationError):
        metrics.mae(ok + 1.5, ok)
    with pytest.raises(ValidationError):
        metrics.mae(ok - 0.1, ok)
    with pytest.raises(ValidationError):
        metrics.mae(ok, ok + 0.5)
    with pytest.raises(ValidationError):
        metrics.mae(np.zeros((4, 3)), ok)
    with pytest.raises(ValidationError):
        metrics.pr_curve(ok, np.zeros((4, 4)))


def _toy_pairs():
    rng = np.random.default_rng(77)
    pairs = []
    for i in range(4):
        gt = random_mask(rng, 8, 8)
        pred = np.clip(gt + rng.normal(0, 0.2, gt.shape), 0, 1)
        pairs.append((f"img_{i}", pred, gt))
    pairs.append(("img_empty", rng.random((8, 8)), np.zeros((8, 8))))
    return pairs


def test_dataset_aggregation_and_empty_gt_skipping():
    pairs = _toy_pairs()
    report = metrics.evaluate_dataset(pairs)
    assert report.num_images == 5
    assert report.skipped_empty_gt == 1
    scored = [r for r in report.per_image if not r.empty_gt]
    assert len(scored) == 4
    assert abs(report.mean_f_max - np.mean([r.f_max for r in scored])) < 1e-15
    assert abs(report.mean_mae - np.mean([r.mae for r in report.per_image])) < 1e-15
    assert report.mean_precision.shape == (256,)
    for r in report.per_image:
        for v in (r.s_measure, r.e_value, r.mae):
            assert 0.0 <= v <= 1.0


def test_dataset_means_independent_of_order_and_threads():
    pairs = _toy_pairs()
    a = metrics.evaluate_dataset(pairs)
    b = metrics.evaluate_dataset(list(reversed(pairs)))
    c = metrics.evaluate_dataset(pairs, threads=3)
    for other in (b, c):
        assert a.mean_s_measure == other.mean_s_measure
        assert a.mean_e_value == other.mean_e_value
        assert a.mean_mae == other.mean_mae
        assert a.mean_f_max == other.mean_f_max
        assert np.array_equal(a.mean_precision, other.mean_precision)


def test_dataset_rejects_duplicates_and_empty_list():
    with pytest.raises(ValidationError):
        metrics.evaluate_dataset([])
    gt = np.eye(4)
    with pytest.raises(ValidationError):
        metrics.evaluate_dataset([("a", gt, gt), ("a", gt, gt)])
