"""Metric tests against independent brute-force oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irdet import metrics as M


# -- independent oracles --------------------------------------------------


def flood_components(mask):
    """8-connectivity components by explicit flood fill (the oracle)."""
    mask = np.asarray(mask).astype(bool)
    seen = np.zeros_like(mask)
    comps = []
    h, w = mask.shape
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                stack = [(r, c)]
                seen[r, c] = True
                pix = []
                while stack:
                    rr, cc = stack.pop()
                    pix.append((rr, cc))
                    for dr in (-1, 0, 1):
                        for dc in (-1, 0, 1):
                            nr, nc = rr + dr, cc + dc
                            if (
                                0 <= nr < h and 0 <= nc < w
                                and mask[nr, nc] and not seen[nr, nc]
                            ):
                                seen[nr, nc] = True
                                stack.append((nr, nc))
                pix = np.array(pix)
                comps.append((pix, pix.mean(axis=0)))
    return comps


def oracle_counts(pred, gt):
    """Per-pixel and per-component counts by direct enumeration."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    inter = union = fp = 0
    for r in range(pred.shape[0]):
        for c in range(pred.shape[1]):
            if pred[r, c] and gt[r, c]:
                inter += 1
            if pred[r, c] or gt[r, c]:
                union += 1
            if pred[r, c] and not gt[r, c]:
                fp += 1
    pred_cent = [cent for _, cent in flood_components(pred)]
    detected = total = 0
    for _, cent in flood_components(gt):
        total += 1
        if any(np.hypot(*(cent - pc)) <= 3.0 for pc in pred_cent):
            detected += 1
    return inter, union, fp, pred.size, detected, total


def random_mask_pair(rng):
    h = int(rng.integers(1, 65))
    w = int(rng.integers(1, 65))
    density = rng.uniform(0.0, 0.2)
    pred = rng.random((h, w)) < density
    gt = rng.random((h, w)) < density
    return pred, gt


# -- IoU ------------------------------------------------------------------


def test_iou_identical_masks():
    m = np.zeros((8, 8), dtype=bool)
    m[2:4, 2:4] = True
    assert M.iou(m, m) == 1.0


def test_iou_disjoint_masks():
    a = np.zeros((8, 8), dtype=bool)
    b = np.zeros((8, 8), dtype=bool)
    a[0, 0] = True
    b[7, 7] = True
    assert M.iou(a, b) == 0.0


def test_iou_half_coverage():
    gt = np.zeros((5, 5), dtype=bool)
    gt[0, :5] = True
    gt[1, :5] = True  # 10 pixels
    pred = np.zeros((5, 5), dtype=bool)
    pred[0, :5] = True  # half of gt, nothing else
    assert M.iou(pred, gt) == 0.5


def test_iou_both_empty_defined_as_one():
    z = np.zeros((4, 4), dtype=bool)
    assert M.iou(z, z) == 1.0


def test_iou_set_accumulation():
    a_p = np.zeros((4, 4), dtype=bool); a_p[0, 0] = True
    a_g = np.zeros((4, 4), dtype=bool); a_g[0, 0] = True
    b_p = np.zeros((4, 4), dtype=bool); b_p[1, 1] = True
    b_g = np.zeros((4, 4), dtype=bool); b_g[2, 2] = True
    # pooled: inter 1, union 3 -- not the mean of per-image IoUs (1 and 0)
    assert M.iou([a_p, b_p], [a_g, b_g]) == pytest.approx(1 / 3)


def test_iou_rejects_shape_mismatch():
    with pytest.raises(M.MetricError):
        M.iou(np.zeros((2, 2)), np.zeros((3, 3)))


# -- connected components -------------------------------------------------


def test_components_square_centroid():
    m = np.zeros((4, 4), dtype=bool)
    m[0:2, 0:2] = True
    comps = M.connected_components(m)
    assert len(comps) == 1
    assert comps[0].centroid == (0.5, 0.5)


def test_components_diagonal_touch_is_one():
    m = np.zeros((3, 3), dtype=bool)
    m[0, 0] = True
    m[1, 1] = True
    assert len(M.connected_components(m)) == 1


def test_components_checkerboard_is_one():
    m = np.indices((4, 4)).sum(axis=0) % 2 == 0
    assert len(M.connected_components(m)) == 1


def test_components_match_flood_fill_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        mask = rng.random((12, 12)) < 0.3
        mine = M.connected_components(mask)
        ref = flood_components(mask)
        assert len(mine) == len(ref)
        mine_sets = {frozenset(map(tuple, c.pixels.tolist())) for c in mine}
        ref_sets = {frozenset(map(tuple, p.tolist())) for p, _ in ref}
        assert mine_sets == ref_sets


# -- Pd -------------------------------------------------------------------


def test_pd_identical_single_target():
    m = np.zeros((8, 8), dtype=bool)
    m[3:5, 3:5] = True
    assert M.pd_counts(m, m) == (1, 1)


def test_pd_three_four_five_triangle_misses():
    gt = np.zeros((32, 32), dtype=bool)
    gt[10, 10] = True
    pred = np.zeros((32, 32), dtype=bool)
    pred[13, 14] = True  # distance 5 > 3
    assert M.pd_counts(pred, gt) == (0, 1)


def test_pd_empty_prediction():
    gt = np.zeros((8, 8), dtype=bool)
    gt[1, 1] = True
    assert M.pd_counts(np.zeros((8, 8), dtype=bool), gt) == (0, 1)


def _fractional_component(extra_col):
    """One 8-connected component: 9 pixels in column 13 (rows 6..14) plus
    one pixel at (10, extra_col); centroid row is exactly 10."""
    pred = np.zeros((32, 32), dtype=bool)
    pred[6:15, 13] = True
    pred[10, extra_col] = True
    return pred


def test_pd_distance_2_9_detected():
    gt = np.zeros((32, 32), dtype=bool)
    gt[10, 10] = True
    pred = _fractional_component(12)  # mean column (9*13 + 12)/10 = 12.9
    comps = M.connected_components(pred)
    assert len(comps) == 1
    assert comps[0].centroid == (10.0, 12.9)
    assert M.pd_counts(pred, gt) == (1, 1)


def test_pd_distance_3_1_missed():
    gt = np.zeros((32, 32), dtype=bool)
    gt[10, 10] = True
    pred = _fractional_component(14)  # mean column (9*13 + 14)/10 = 13.1
    comps = M.connected_components(pred)
    assert len(comps) == 1
    assert comps[0].centroid == (10.0, 13.1)
    assert M.pd_counts(pred, gt) == (0, 1)


def test_pd_one_pred_satisfies_two_targets():
    gt = np.zeros((16, 16), dtype=bool)
    gt[5, 5] = True
    gt[5, 9] = True
    pred = np.zeros((16, 16), dtype=bool)
    pred[5, 7] = True  # within 3 of both
    assert M.pd_counts(pred, gt) == (2, 2)


# -- Fa -------------------------------------------------------------------


def test_fa_subset_prediction_is_zero():
    gt = np.zeros((8, 8), dtype=bool)
    gt[2:5, 2:5] = True
    pred = np.zeros((8, 8), dtype=bool)
    pred[3, 3] = True
    assert M.fa(pred, gt) == 0.0


def test_fa_one_stray_pixel_per_megapixel():
    gt = np.zeros((1000, 1000), dtype=bool)
    pred = np.zeros((1000, 1000), dtype=bool)
    pred[0, 0] = True
    assert M.fa(pred, gt) == pytest.approx(1.0)


def test_fa_all_false():
    gt = np.zeros((100, 100), dtype=bool)
    pred = np.ones((100, 100), dtype=bool)
    assert M.fa(pred, gt) == pytest.approx(1e6)


def test_fa_scaling_is_exactly_1e6_fraction():
    rng = np.random.default_rng(1)
    pred = rng.random((40, 50)) < 0.1
    gt = rng.random((40, 50)) < 0.1
    fp = np.logical_and(pred, ~gt).sum()
    assert M.fa(pred, gt) == pytest.approx(1e6 * fp / 2000)


# -- brute-force equivalence ---------------------------------------------


def test_metrics_match_brute_force_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        pred, gt = random_mask_pair(rng)
        inter, union, fp, size, det, tot = oracle_counts(pred, gt)
        assert M.iou_counts(pred, gt) == (inter, union)
        assert M.fa_counts(pred, gt) == (fp, size)
        assert M.pd_counts(pred, gt) == (det, tot)


# -- ROC ------------------------------------------------------------------


def roc_fixture(rng, n=5):
    maps, gts = [], []
    for _ in range(n):
        g = rng.random((16, 16)) < 0.1
        if not g.any():
            g[0, 0] = True
        m = np.clip(g * rng.uniform(0.5, 1.0, g.shape)
                    + rng.uniform(0, 0.4, g.shape), 0, 1)
        maps.append(m)
        gts.append(g)
    return maps, gts


def test_roc_endpoints():
    maps, gts = roc_fixture(np.random.default_rng(3))
    pts = M.roc(maps, gts, thresholds=[0.0, 1.5])
    assert pts[0] == (1.0, 1.0)
    assert pts[1] == (0.0, 0.0)


def test_roc_perfect_map():
    g = np.zeros((8, 8), dtype=bool)
    g[4, 4] = True
    conf = g.astype(float)
    (fpr, tpr), = M.roc([conf], [g], thresholds=[0.5])
    assert (fpr, tpr) == (0.0, 1.0)


def test_roc_monotone_in_threshold():
    maps, gts = roc_fixture(np.random.default_rng(4))
    pts = M.roc(maps, gts)
    for (f0, t0), (f1, t1) in zip(pts, pts[1:]):
        assert f1 <= f0 + 1e-12
        assert t1 <= t0 + 1e-12


def test_roc_rejects_mismatched_lists():
    with pytest.raises(M.MetricError):
        M.roc([np.zeros((2, 2))], [])


# -- SNR ------------------------------------------------------------------


def test_snr_constructed_value():
    rng = np.random.default_rng(5)
    img = rng.normal(0.0, 1.0, (64, 64))
    gt = np.zeros((64, 64), dtype=bool)
    gt[30:32, 30:32] = True
    img[gt] = 10.0
    comp = M.connected_components(gt)[0]
    snr = M.snr_of_target(img, comp, gt)
    assert snr == pytest.approx(10.0, abs=1.0)


def test_snr_zero_contrast():
    img = np.full((32, 32), 0.5)
    gt = np.zeros((32, 32), dtype=bool)
    gt[10, 10] = True
    comp = M.connected_components(gt)[0]
    # flat background: sigma floored, mean difference exactly zero
    assert M.snr_of_target(img, comp, gt) == 0.0


def test_snr_subsets_nested():
    rng = np.random.default_rng(6)
    images, gts = [], []
    for i in range(20):
        img = rng.normal(0.0, 0.1, (48, 48))
        gt = np.zeros((48, 48), dtype=bool)
        gt[20 + i % 4, 20] = True
        img[gt] = rng.uniform(0.1, 1.0)
        images.append(img)
        gts.append(gt)
    s3 = set(M.snr_subset(images, gts, 3.0))
    s4 = set(M.snr_subset(images, gts, 4.0))
    s5 = set(M.snr_subset(images, gts, 5.0))
    assert s3 <= s4 <= s5


def test_image_snr_is_min_over_targets():
    rng = np.random.default_rng(7)
    img = rng.normal(0.0, 0.5, (64, 64))
    gt = np.zeros((64, 64), dtype=bool)
    gt[10, 10] = True
    gt[40, 40] = True
    img[10, 10] = 8.0
    img[40, 40] = 2.0
    comps = M.connected_components(gt)
    values = [M.snr_of_target(img, c, gt) for c in comps]
    assert M.image_snr(img, gt) == pytest.approx(min(values))


def test_image_snr_empty_mask_is_none():
    assert M.image_snr(np.zeros((8, 8)), np.zeros((8, 8), dtype=bool)) is None


# -- report ---------------------------------------------------------------


def test_evaluate_report_fields():
    rng = np.random.default_rng(8)
    preds, gts = [], []
    for _ in range(3):
        p, g = random_mask_pair(rng)
        preds.append(p)
        gts.append(g)
    rep = M.evaluate(preds, gts)
    assert 0.0 <= rep.iou <= 1.0
    assert 0.0 <= rep.pd <= 1.0
    assert rep.fa >= 0.0
    assert len(rep.per_image) == 3
    assert "iou" in rep.table()
    assert rep.metrics_csv().startswith("metric,value")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_metric_oracle_property(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_mask_pair(rng)
    inter, union, fp, size, det, tot = oracle_counts(pred, gt)
    assert M.iou_counts(pred, gt) == (inter, union)
    assert M.fa_counts(pred, gt) == (fp, size)
    assert M.pd_counts(pred, gt) == (det, tot)
