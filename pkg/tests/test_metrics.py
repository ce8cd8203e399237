import pytest
import numpy as np

from maxminwsl.masking import SoftMask
from maxminwsl.metrics import (
    binarize,
    build_report,
    classification_error,
    dice,
    f1_from_confusion,
    f1_scores,
    pixel_confusion,
    size_report,
)


@pytest.mark.parametrize("wrong, expected", [(0, 0.0), (1, 1.25), (2, 2.5)])
def test_classification_error(wrong, expected):
    truths = np.zeros(80, dtype=int)
    preds = truths.copy()
    preds[:wrong] = 1
    assert classification_error(preds, truths) == pytest.approx(expected)


def test_classification_error_permutation_invariant(rng):
    truths = rng.integers(0, 2, size=50)
    preds = rng.integers(0, 2, size=50)
    order = rng.permutation(50)
    assert classification_error(preds, truths) == classification_error(preds[order], truths[order])


def test_classification_error_rejects_bad_input():
    with pytest.raises(ValueError):
        classification_error([], [])
    with pytest.raises(ValueError):
        classification_error([0, 1], [0])


def test_binarize_threshold():
    assert binarize(np.array([0.49, 0.5, 0.9])).tolist() == [False, True, True]
    assert binarize(SoftMask(np.full((1, 2), 0.6))).all()


def test_f1_perfect_prediction(rng):
    gt = rng.uniform(size=(8, 8)) > 0.5
    assert f1_scores(gt, gt) == (100.0, 100.0)


def test_f1_all_ones_prediction():
    gt = np.zeros((8, 8), dtype=bool)
    gt[:4] = True
    f1_plus, f1_minus = f1_scores(np.ones((8, 8), dtype=bool), gt)
    assert f1_minus == 0.0
    assert f1_plus == pytest.approx(66.67, abs=5e-3)


def test_f1_empty_sets():
    empty = np.zeros((4, 4), dtype=bool)
    assert f1_scores(empty, empty) == (100.0, 100.0)
    assert dice(0, 0, 0) == 100.0


def test_f1_complement_symmetry(rng):
    pred = rng.uniform(size=(16, 16)) > 0.4
    gt = rng.uniform(size=(16, 16)) > 0.6
    assert f1_scores(pred, gt)[0] == f1_scores(~pred, ~gt)[1]


def test_f1_complement_symmetry_for_soft_masks(rng):
    pred = SoftMask(np.round(rng.uniform(size=(16, 16)) * 4) / 4)
    gt = rng.uniform(size=(16, 16)) > 0.6
    assert np.any(pred.values == 0.5)
    assert f1_scores(pred, gt)[0] == f1_scores(~binarize(pred), ~gt)[1]
    # a soft complement keeps threshold pixels in the foreground
    assert np.all(binarize(pred.complement())[pred.values == 0.5])


def test_f1_shape_mismatch():
    with pytest.raises(ValueError):
        f1_scores(np.ones((2, 2), dtype=bool), np.ones((3, 3), dtype=bool))


def test_pixel_confusion_hand_count():
    gt = np.array([[1, 1], [0, 0]], dtype=bool)
    pred = np.array([[1, 0], [0, 0]], dtype=bool)
    assert pixel_confusion([pred], [gt]).tolist() == [[1, 1], [0, 2]]


def test_pixel_confusion_extremes(rng):
    gts = [rng.uniform(size=(5, 5)) > 0.5 for _ in range(3)]
    same = pixel_confusion(gts, gts)
    assert same[0, 1] == 0 and same[1, 0] == 0
    flipped = pixel_confusion([~g for g in gts], gts)
    assert flipped[0, 0] == 0 and flipped[1, 1] == 0
    assert flipped.sum() == 75


def test_pixel_confusion_length_mismatch():
    with pytest.raises(ValueError):
        pixel_confusion([np.ones((2, 2))], [])


def test_pooled_f1_matches_confusion(rng):
    preds = [rng.uniform(size=(6, 6)) for _ in range(4)]
    gts = [rng.uniform(size=(6, 6)) > 0.5 for _ in range(4)]
    confusion = pixel_confusion(preds, gts)
    (tp, fn), (fp, tn) = confusion.tolist()
    f1_plus, f1_minus = f1_from_confusion(confusion)
    assert abs(f1_plus - 100.0 * 2 * tp / (2 * tp + fp + fn)) <= 1e-12
    assert abs(f1_minus - 100.0 * 2 * tn / (2 * tn + fn + fp)) <= 1e-12


def test_size_report():
    gt = [np.eye(4, dtype=bool), np.zeros((4, 4), dtype=bool)]
    exact = size_report(gt, gt, names=["a", "b"])
    assert exact.mean_abs_gap == 0.0
    assert [r.sample for r in exact.records] == ["a", "b"]
    ones = size_report([np.ones((4, 4))] * 2, gt)
    assert ones.mean_pred_fraction == 1.0
    assert ones.records[0].true_fraction == 0.25


def test_build_report_skips_unclassified_samples():
    gt = [np.ones((2, 2), dtype=bool), np.zeros((2, 2), dtype=bool)]
    pred = [np.ones((2, 2)), np.zeros((2, 2))]
    report = build_report([1, 1], [1, 0], pred, gt, names=["x", "bg"], classified=[True, False])
    assert report.cl_error == 0.0
    assert report.f1_plus == 100.0 and report.f1_minus == 100.0
    assert sum(map(sum, report.confusion)) == 8
    assert report.n_samples == 2

    only_background = build_report([1], [0], [np.zeros((2, 2))], [gt[1]], classified=[False])
    assert only_background.cl_error is None
