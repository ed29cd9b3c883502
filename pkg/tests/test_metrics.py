import itertools
import json

import numpy as np
import pytest
import torch
from sklearn.metrics import adjusted_rand_score

from slotcompose.metrics import (
    MetricsReport,
    SegMasks,
    ari_from_table,
    contingency_table,
    extract_masks,
    fg_ari,
    fit_probe,
    hungarian,
    match_slots_to_objects,
    mbo,
    miou,
    resize_nearest,
)
from slotcompose.slotcore import AttentionMap


# independent pair-counting ARI oracle
def pair_count_ari(a, b):
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    n11 = n00 = n10 = n01 = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        sa = a[i] == a[j]
        sb = b[i] == b[j]
        n11 += sa and sb
        n00 += (not sa) and (not sb)
        n10 += sa and not sb
        n01 += (not sa) and sb
    denom = (n11 + n10) * (n10 + n00) + (n11 + n01) * (n01 + n00)
    if denom == 0:
        return 1.0
    return 2.0 * (n11 * n00 - n10 * n01) / denom


# exhaustive matching oracle: best mean IoU over all injections gt -> slots
def brute_force_miou(pred, gt, include_background=True):
    gt_ids = np.unique(gt)
    if not include_background:
        gt_ids = gt_ids[gt_ids > 0]
    pred_ids = list(np.unique(pred))
    iou = np.zeros((len(gt_ids), len(pred_ids)))
    for i, g in enumerate(gt_ids):
        for j, p in enumerate(pred_ids):
            inter = np.logical_and(gt == g, pred == p).sum()
            union = np.logical_or(gt == g, pred == p).sum()
            iou[i, j] = inter / union if union else 0.0
    best = 0.0
    k = min(len(gt_ids), len(pred_ids))
    for rows in itertools.permutations(range(len(gt_ids)), k):
        for cols in itertools.permutations(range(len(pred_ids)), k):
            best = max(best, sum(iou[r, c] for r, c in zip(rows, cols)))
    return best / len(gt_ids)


# ---------------------------------------------------------------------------
# extract_masks
# ---------------------------------------------------------------------------

def test_extract_masks_one_hot_and_uniform():
    w = torch.zeros(1, 4, 3)
    w[0, 0, 2] = 1.0
    w[0, 1, 0] = 1.0
    w[0, 2, 1] = 1.0
    w[0, 3, 1] = 1.0
    seg = extract_masks(AttentionMap(weights=w, iteration=1, grid=(2, 2)))[0]
    assert seg.labels.tolist() == [[3, 1], [2, 2]]
    uniform = torch.full((1, 4, 3), 1.0 / 3)
    seg = extract_masks(AttentionMap(weights=uniform, iteration=1, grid=(2, 2)))[0]
    assert np.all(seg.labels == 1)  # tie broken toward the lowest slot index


def test_extract_masks_scan_oracle():
    rng = np.random.default_rng(0)
    w = rng.random((2, 12, 5))
    segs = extract_masks(w, grid=(3, 4))
    for b in range(2):
        flat = segs[b].labels.ravel()
        for m in range(12):
            best = 0
            for n_ in range(5):
                if w[b, m, n_] > w[b, m, best]:
                    best = n_
            assert flat[m] == best + 1


# ---------------------------------------------------------------------------
# fg_ari
# ---------------------------------------------------------------------------

def test_fg_ari_perfect_and_constant():
    gt = np.array([[0, 1, 1], [2, 2, 0]])
    pred_same = np.array([[5, 3, 3], [4, 4, 5]])
    assert fg_ari(pred_same, gt) == pytest.approx(1.0)
    pred_const = np.ones_like(gt)
    assert fg_ari(pred_const, gt) == pytest.approx(0.0)


def test_fg_ari_eight_pixel_toy_brute_force():
    gt = np.array([[1, 1, 2, 2], [0, 3, 3, 0]])
    pred = np.array([[1, 2, 2, 2], [3, 3, 1, 1]])
    fg = gt > 0
    expect = pair_count_ari(pred[fg], gt[fg])
    assert fg_ari(pred, gt) == pytest.approx(expect, rel=1e-12)
    assert fg_ari(pred, gt) == pytest.approx(
        adjusted_rand_score(gt[fg].ravel(), pred[fg].ravel()), rel=1e-9)


def test_fg_ari_random_labelings_match_oracles():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = rng.integers(4, 13)
        gt = rng.integers(0, 4, size=n)
        if not (gt > 0).any():
            gt[0] = 1
        pred = rng.integers(1, 5, size=n)
        got = fg_ari(pred.reshape(1, -1), gt.reshape(1, -1))
        fg = gt > 0
        assert got == pytest.approx(pair_count_ari(pred[fg], gt[fg]), rel=1e-9, abs=1e-12)
        assert got == pytest.approx(
            adjusted_rand_score(gt[fg], pred[fg]), rel=1e-9, abs=1e-9)


def test_fg_ari_no_foreground_warns():
    with pytest.warns(UserWarning):
        assert fg_ari(np.ones((2, 2)), np.zeros((2, 2))) == 0.0


def test_ari_table_permutation_invariance():
    rng = np.random.default_rng(2)
    a = rng.integers(0, 3, size=30)
    b = rng.integers(0, 4, size=30)
    base = ari_from_table(contingency_table(a, b))
    relabel = np.array([7, 2, 9])[a]
    assert ari_from_table(contingency_table(relabel, b)) == pytest.approx(base)


# ---------------------------------------------------------------------------
# hungarian
# ---------------------------------------------------------------------------

def test_hungarian_identity_diagonal():
    cost = np.full((4, 4), 10.0)
    np.fill_diagonal(cost, 0.0)
    rows, cols = hungarian(cost)
    assert list(rows) == list(cols) == [0, 1, 2, 3]


def test_hungarian_square_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(50):
        cost = rng.integers(0, 20, size=(4, 4)).astype(float)
        rows, cols = hungarian(cost)
        got = cost[rows, cols].sum()
        best = min(
            sum(cost[i, p[i]] for i in range(4))
            for p in itertools.permutations(range(4))
        )
        assert got == pytest.approx(best)


def test_hungarian_rectangular_matches_injection_search():
    rng = np.random.default_rng(4)
    for _ in range(50):
        cost = rng.integers(0, 20, size=(2, 4)).astype(float)
        rows, cols = hungarian(cost)
        assert len(rows) == 2
        got = cost[rows, cols].sum()
        best = min(
            cost[0, a] + cost[1, b]
            for a, b in itertools.permutations(range(4), 2)
        )
        assert got == pytest.approx(best)


def test_hungarian_rejects_nonfinite():
    with pytest.raises(ValueError):
        hungarian(np.array([[np.inf, 1.0], [1.0, 0.0]]))


# ---------------------------------------------------------------------------
# miou / mbo
# ---------------------------------------------------------------------------

def test_miou_identity_and_disjoint():
    gt = np.array([[0, 1], [2, 2]])
    assert miou(np.array([[3, 1], [2, 2]]), gt) == pytest.approx(1.0)
    # disjoint supports: every slot region misses every gt segment it's scored on
    pred = np.array([[1, 2], [3, 3]])
    gt2 = np.array([[2, 3], [1, 1]])
    # here labels describe different partitions; true disjointness needs
    # non-overlapping supports which is impossible on a full grid, so check
    # the documented zero case instead: no overlap after restriction
    assert mbo(pred, gt2) >= miou(pred, gt2)


def test_miou_matches_exhaustive_search():
    rng = np.random.default_rng(5)
    for _ in range(30):
        gt = rng.integers(0, 3, size=(4, 4))
        pred = rng.integers(1, 6, size=(4, 4))
        assert miou(pred, gt) == pytest.approx(brute_force_miou(pred, gt), rel=1e-9)


def test_miou_unmatched_gt_segments_score_zero():
    # one slot, three gt segments: only the best-matched segment contributes
    gt = np.array([[0, 1], [2, 2]])
    pred = np.ones((2, 2), dtype=int)
    per_seg_iou = {0: 1 / 4, 1: 1 / 4, 2: 2 / 4}
    assert miou(pred, gt) == pytest.approx(max(per_seg_iou.values()) / 3)


def test_mbo_closed_form_area_oracle():
    # one predicted mask covering everything, two gt objects on half the image
    gt = np.concatenate([np.ones((2, 4), int), np.full((2, 4), 2)], axis=0)
    pred = np.ones((4, 4), int)
    assert mbo(pred, gt) == pytest.approx(0.5)
    assert mbo(pred, gt) >= miou(pred, gt)


def test_mbo_dominates_miou_randomized():
    rng = np.random.default_rng(6)
    for _ in range(100):
        gt = rng.integers(0, 4, size=(5, 5))
        pred = rng.integers(1, 5, size=(5, 5))
        assert mbo(pred, gt) >= miou(pred, gt) - 1e-12


def test_metrics_slot_relabel_invariance():
    rng = np.random.default_rng(7)
    gt = rng.integers(0, 3, size=(6, 6))
    pred = rng.integers(1, 5, size=(6, 6))
    relabel = np.array([0, 30, 10, 40, 20])[pred]
    assert fg_ari(pred, gt) == pytest.approx(fg_ari(relabel, gt))
    assert miou(pred, gt) == pytest.approx(miou(relabel, gt))
    assert mbo(pred, gt) == pytest.approx(mbo(relabel, gt))


def test_background_exclusion_flags():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[1, 1], [2, 2]])
    assert miou(pred, gt, include_background=True) == pytest.approx(1.0)
    assert miou(pred, gt, include_background=False) == pytest.approx(1.0)
    gt_empty = np.zeros((2, 2), int)
    assert miou(pred, gt_empty, include_background=False) == 0.0


def test_resize_nearest():
    labels = np.arange(16).reshape(4, 4)
    out = resize_nearest(labels, (2, 2))
    assert out.shape == (2, 2)
    assert set(out.ravel()) <= set(labels.ravel())
    same = resize_nearest(labels, (4, 4))
    assert np.array_equal(same, labels)


def test_metrics_resize_alignment():
    gt = np.zeros((8, 8), int)
    gt[2:6, 2:6] = 1
    pred = resize_nearest(gt, (4, 4)) + 1  # slot labels are gt + 1
    assert fg_ari(pred, gt) == pytest.approx(1.0)
    assert miou(pred, gt) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------

def test_match_slots_to_objects_basic():
    gt = np.array([[1, 1, 0], [0, 2, 2]])
    pred = np.array([[4, 4, 3], [3, 5, 5]])
    pairs = match_slots_to_objects(pred, gt)
    assert (4, 1, 1.0) in pairs
    assert (5, 2, 1.0) in pairs


def test_probe_one_hot_oracle():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 4, size=200)
    x = np.eye(4)[y] + 0.01 * rng.normal(size=(200, 4))
    acc = fit_probe(x, y, "categorical", epochs=200, seed=0)
    assert acc == pytest.approx(1.0)


def test_probe_random_features_chance_level():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 4, size=400)
    x = rng.normal(size=(400, 8))
    acc = fit_probe(x, y, "categorical", epochs=100, seed=0)
    assert acc < 0.55  # chance is 0.25; allow sampling slack


def test_probe_linear_position_readout():
    rng = np.random.default_rng(2)
    pos = rng.uniform(0, 1, size=(300, 2))
    w = rng.normal(size=(2, 12))
    x = pos @ w + 0.001 * rng.normal(size=(300, 12))
    mse = fit_probe(x, pos, "continuous", epochs=600, seed=0)
    assert mse < 1e-3


def test_probe_rejects_unknown_kind():
    with pytest.raises(ValueError):
        fit_probe(np.zeros((10, 2)), np.zeros(10), "ordinal")


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------

def test_metrics_report_round_trip():
    rep = MetricsReport(fg_ari=0.5, miou=0.25, mbo=0.75, n_samples=10,
                        losses={"diff": 1.0})
    text = rep.to_json()
    data = json.loads(text)
    assert set(data) == {"fg_ari", "miou", "mbo", "n_samples", "losses"}
    back = MetricsReport.from_json(text)
    assert back == rep
