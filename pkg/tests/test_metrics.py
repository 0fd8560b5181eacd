import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from neuroscan import metrics
from neuroscan.dataset import LABELS
from oracles import (
    all_masks,
    autograd,
    central_difference,
    dice_sets,
    foreground,
    hausdorff_loops,
    iou_sets,
    relative_error,
)

mask_pairs = st.integers(1, 12).flatmap(
    lambda h: st.integers(1, 12).flatmap(
        lambda w: st.tuples(
            hnp.arrays(np.uint8, (h, w), elements=st.integers(0, 1)),
            hnp.arrays(np.uint8, (h, w), elements=st.integers(0, 1)),
        )
    )
)


# -------------------------------------------------------------------- losses


def test_cce_closed_forms():
    onehot = torch.eye(4, dtype=torch.float64)[[1]]
    assert metrics.categorical_cross_entropy(onehot, onehot).item() <= 1.2e-7
    uniform = torch.full((3, 4), 0.25, dtype=torch.float64)
    labels = torch.eye(4, dtype=torch.float64)[[0, 2, 3]]
    assert metrics.categorical_cross_entropy(uniform, labels).item() == pytest.approx(math.log(4), abs=1e-12)
    half = torch.tensor([[0.5, 0.2, 0.2, 0.1]], dtype=torch.float64)
    assert metrics.categorical_cross_entropy(half, torch.eye(4)[[0]]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert math.log(4) == pytest.approx(1.386294, abs=1e-6)
    assert math.log(2) == pytest.approx(0.693147, abs=1e-6)


def test_cce_shape_mismatch():
    with pytest.raises(ValueError):
        metrics.categorical_cross_entropy(torch.full((2, 4), 0.25), torch.eye(4)[:3])


def test_dice_loss_extremes():
    truth = torch.zeros(6, 6, dtype=torch.float64)
    truth[1:4, 2:5] = 1
    assert metrics.dice_loss(truth.clone(), truth).item() <= 1e-6
    assert metrics.dice_loss(torch.zeros_like(truth), truth).item() == pytest.approx(1.0, abs=1e-6)


def test_combined_loss_weights():
    g = torch.Generator().manual_seed(0)
    pred = torch.rand(4, 4, generator=g, dtype=torch.float64)
    truth = (torch.rand(4, 4, generator=g, dtype=torch.float64) > 0.5).double()
    bce, dl = metrics.binary_cross_entropy(pred, truth), metrics.dice_loss(pred, truth)
    assert metrics.combined_seg_loss(pred, truth, 1, 0).item() == bce.item()
    assert metrics.combined_seg_loss(pred, truth, 0, 1).item() == dl.item()
    # compositional oracle: BCE and Dice written out element by element
    p = pred.clamp(1e-7, 1 - 1e-7).tolist()
    t = truth.tolist()
    bce_ref = -sum(ti * math.log(pi) + (1 - ti) * math.log(1 - pi)
                   for pr, tr in zip(p, t) for pi, ti in zip(pr, tr)) / 16
    inter = sum(pi * ti for pr, tr in zip(pred.tolist(), t) for pi, ti in zip(pr, tr))
    dice_ref = 1 - (2 * inter + 1e-6) / (pred.sum().item() + truth.sum().item() + 1e-6)
    assert metrics.combined_seg_loss(pred, truth, 0.7, 1.3).item() == pytest.approx(
        0.7 * bce_ref + 1.3 * dice_ref, abs=1e-9)


def test_combined_loss_rejects_bad_weights():
    p = torch.rand(2, 2)
    with pytest.raises(ValueError):
        metrics.combined_seg_loss(p, p, 0, 0)
    with pytest.raises(ValueError):
        metrics.combined_seg_loss(p, p, -1, 1)


@pytest.mark.parametrize("name", ["dice_loss", "bce", "combined"])
def test_loss_gradients_match_finite_differences(name):
    g = torch.Generator().manual_seed(7)
    for _ in range(5):
        pred = torch.rand(4, 4, generator=g, dtype=torch.float64) * 0.9 + 0.05
        truth = (torch.rand(4, 4, generator=g, dtype=torch.float64) > 0.5).double()
        fn = {
            "dice_loss": lambda x: metrics.dice_loss(x, truth),
            "bce": lambda x: metrics.binary_cross_entropy(x, truth),
            "combined": lambda x: metrics.combined_seg_loss(x, truth),
        }[name]
        assert relative_error(autograd(fn, pred), central_difference(fn, pred)) < 1e-4


# ----------------------------------------------------------- overlap metrics


def test_small_hand_counted_example():
    a = np.zeros((3, 3), np.uint8)
    b = np.zeros((3, 3), np.uint8)
    a[0, 0] = a[0, 1] = 1
    b[0, 1] = b[0, 2] = 1
    assert metrics.dice_coefficient(a, b) == 0.5
    assert metrics.iou(a, b) == pytest.approx(1 / 3, abs=0)
    assert metrics.hausdorff(a, b) == 1.0


def test_identity_disjoint_and_empty_conventions():
    a = np.zeros((5, 5), np.uint8)
    a[1:3, 1:4] = 1
    b = np.zeros_like(a)
    b[4, 4] = 1
    empty = np.zeros_like(a)
    assert metrics.dice_coefficient(a, a) == 1.0 and metrics.iou(a, a) == 1.0
    assert metrics.hausdorff(a, a) == 0.0
    assert metrics.dice_coefficient(a, b) == 0.0 and metrics.iou(a, b) == 0.0
    assert metrics.dice_coefficient(empty, empty) == 1.0 and metrics.iou(empty, empty) == 1.0
    assert metrics.hausdorff(empty, empty) == 0.0
    assert metrics.hausdorff(a, empty) == math.inf == metrics.hausdorff(empty, a)
    assert metrics.SegScores(0.0, 0.0, math.inf).to_dict()["hausdorff"] is None


def test_hausdorff_pixel_distance():
    a = np.zeros((8, 8), np.uint8)
    b = np.zeros((8, 8), np.uint8)
    a[0, 0] = 1
    b[3, 4] = 1
    assert metrics.hausdorff(a, b) == 5.0


def test_hausdorff_superset_with_outlier():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a = np.zeros((16, 16), np.uint8)
        a[4:8, 3:9] = 1
        b = a.copy()
        r, c = rng.integers(10, 16), rng.integers(10, 16)
        b[r, c] = 1
        expected = hausdorff_loops(foreground(a), foreground(b))
        # h(A, B) = 0 since A is inside B, so the outlier decides
        assert expected == pytest.approx(min(math.hypot(r - y, c - x) for y, x in foreground(a)))
        assert metrics.hausdorff(a, b) == pytest.approx(expected, abs=1e-9)


def test_hausdorff_percentile_variant():
    a = np.zeros((20, 20), np.uint8)
    a[5:10, 5:10] = 1
    b = a.copy()
    b[19, 19] = 1
    assert metrics.hausdorff(a, b, percentile=95) < metrics.hausdorff(a, b)


def test_exhaustive_2x2_sweep_against_oracles():
    masks = all_masks(2, 2)
    for a in masks:
        fa = foreground(a)
        for b in masks:
            fb = foreground(b)
            assert metrics.dice_coefficient(a, b) == dice_sets(fa, fb)
            assert metrics.iou(a, b) == iou_sets(fa, fb)
            assert metrics.hausdorff(a, b) == pytest.approx(hausdorff_loops(fa, fb), abs=1e-9)


@settings(max_examples=150, deadline=None)
@given(mask_pairs)
def test_metric_symmetry_bounds_and_identity(pair):
    a, b = pair
    d, j, h = metrics.dice_coefficient(a, b), metrics.iou(a, b), metrics.hausdorff(a, b)
    assert d == metrics.dice_coefficient(b, a) and j == metrics.iou(b, a)
    assert h == metrics.hausdorff(b, a)
    assert 0 <= d <= 1 and 0 <= j <= 1 and h >= 0
    assert abs(d - 2 * j / (1 + j)) <= 1e-9
    assert (h == 0) == (foreground(a) == foreground(b))
    assert d == dice_sets(foreground(a), foreground(b))


@settings(max_examples=60, deadline=None)
@given(mask_pairs, st.sampled_from([None, 50, 95]))
def test_hausdorff_paths_agree(pair, percentile):
    a, b = pair
    dense = metrics.hausdorff(a, b, percentile)
    saved = metrics._DENSE_PAIRS
    metrics._DENSE_PAIRS = -1  # force the distance-transform path
    try:
        edt = metrics.hausdorff(a, b, percentile)
    finally:
        metrics._DENSE_PAIRS = saved
    assert dense == pytest.approx(edt, abs=1e-9) or (math.isinf(dense) and math.isinf(edt))
    if percentile is None:
        assert dense == pytest.approx(hausdorff_loops(foreground(a), foreground(b)), abs=1e-9)


def test_shape_mismatch_is_fatal():
    with pytest.raises(ValueError):
        metrics.dice_coefficient(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        metrics.iou(np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        metrics.hausdorff(np.zeros((2, 2)), np.zeros((3, 2)))


# ------------------------------------------------------------ classification


def test_all_correct_report():
    labels = list(LABELS) * 2
    rep = metrics.confusion_and_report(labels, labels)
    np.testing.assert_array_equal(rep.matrix.counts, 2 * np.eye(4, dtype=int))
    assert rep.accuracy == 1.0
    assert all(v == 1.0 for d in (rep.precision, rep.recall, rep.f1) for v in d.values())
    assert rep.undefined == []


def test_hand_counted_two_class_report():
    A, B = "meningioma", "glioma"
    rep = metrics.confusion_and_report([A, B, B, B], [A, A, B, B])
    assert rep.precision[B] == pytest.approx(2 / 3)
    assert rep.recall[A] == 0.5
    assert rep.accuracy == 0.75
    assert rep.precision[A] == 1.0 and rep.recall[B] == 1.0
    assert rep.f1[A] == pytest.approx(2 * 1.0 * 0.5 / 1.5)
    ovr = metrics.sensitivity_specificity(rep.matrix, A)
    assert (ovr.sensitivity, ovr.specificity) == (0.5, 1.0)
    # classes never seen: zero denominators reported as 0 and flagged
    assert rep.precision["pituitary"] == 0.0 and "precision:pituitary" in rep.undefined


def test_sensitivity_flagged_for_zero_support():
    cm = metrics.confusion_matrix(["glioma", "glioma"], ["glioma", "glioma"])
    ovr = metrics.sensitivity_specificity(cm, "pituitary")
    assert ovr.sensitivity == 0.0 and not ovr.sensitivity_defined
    assert ovr.specificity == 1.0 and ovr.specificity_defined
    perfect = metrics.confusion_matrix(list(LABELS), list(LABELS))
    for c in LABELS:
        r = metrics.sensitivity_specificity(perfect, c)
        assert (r.sensitivity, r.specificity) == (1.0, 1.0)


def test_unknown_label_is_fatal():
    with pytest.raises(ValueError, match="unknown label"):
        metrics.confusion_matrix(["glioma"], ["astrocytoma"])
    with pytest.raises(ValueError, match="unknown label"):
        metrics.confusion_matrix([7], [0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(LABELS), st.sampled_from(LABELS)), min_size=1, max_size=60))
def test_confusion_conservation(pairs):
    preds, truths = [p for p, _ in pairs], [t for _, t in pairs]
    rep = metrics.confusion_and_report(preds, truths)
    c = rep.matrix.counts
    assert (c >= 0).all() and rep.matrix.total == len(pairs)
    for i, lab in enumerate(LABELS):
        assert c[i].sum() == truths.count(lab) == rep.support[lab]
    # micro-averaged recall is accuracy
    micro = sum(rep.recall[lab] * rep.support[lab] for lab in LABELS) / len(pairs)
    assert micro == pytest.approx(rep.accuracy, abs=1e-12)
    assert rep.accuracy == sum(p == t for p, t in pairs) / len(pairs)
