import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refinery.errors import LabelError, ShapeError
from refinery.evaluate import (ConfusionMatrix, argmax_labels, average_probs, multiscale_predict,
                               predict, report)


TRUTH = np.array([[0, 0, 1, 1]] * 4)
PRED = TRUTH.copy()
PRED[0, 0] = 1
PRED[1, 2] = 0
PRED[3, 3] = 0


def test_hand_tallied_confusion():
    cm = ConfusionMatrix(2).accumulate(PRED, TRUTH)
    np.testing.assert_array_equal(cm.counts, [[7, 1], [2, 6]])
    assert cm.total == 16


def test_perfect_prediction_is_diagonal(rng):
    t = rng.integers(0, 3, (6, 6))
    cm = ConfusionMatrix(3).accumulate(t, t)
    assert (cm.counts == np.diag(np.diag(cm.counts))).all()
    r = report(cm)
    assert r.mean_iou == 1.0 and r.pixel_acc == 1.0 and r.mean_acc == 1.0


def test_all_ignore_leaves_matrix_unchanged():
    cm = ConfusionMatrix(2).accumulate(PRED, TRUTH)
    before = cm.counts.copy()
    cm.accumulate(np.zeros((3, 3)), np.full((3, 3), 255))
    np.testing.assert_array_equal(cm.counts, before)


def test_report_hand_example():
    cm = ConfusionMatrix(2)
    cm.counts[...] = [[3, 1], [2, 2]]
    r = report(cm)
    assert r.iou[0] == 3 / 6 and r.iou[1] == 2 / 5
    assert r.pixel_acc == 5 / 8
    assert r.mean_acc == (3 / 4 + 2 / 4) / 2
    assert r.mean_iou == (3 / 6 + 2 / 5) / 2


def test_disjoint_class_iou_zero():
    t = np.array([[0, 1], [1, 1]])
    p = np.array([[1, 0], [0, 0]])
    assert report(ConfusionMatrix(2).accumulate(p, t)).iou[0] == 0.0


def test_empty_classes_excluded():
    t = np.array([[0, 0], [2, 2]])
    r = report(ConfusionMatrix(3).accumulate(t, t))
    assert r.empty_classes == [1] and np.isnan(r.iou[1]) and r.mean_iou == 1.0


def test_empty_report():
    r = report(ConfusionMatrix(2))
    assert r.empty and "EMPTY" in r.to_text()


def test_errors():
    with pytest.raises(ShapeError):
        ConfusionMatrix(2).accumulate(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(LabelError):
        ConfusionMatrix(2).accumulate(np.zeros((2, 2)), np.full((2, 2), 4))


def test_csv_columns():
    cm = ConfusionMatrix(2)
    cm.counts[...] = [[3, 1], [2, 2]]
    lines = report(cm).to_csv().splitlines()
    assert lines[0] == "class,iou,acc"
    assert lines[1] == "0,0.5000,0.7500"
    assert [l.split(",")[0] for l in lines[3:]] == ["mean_iou", "pixel_acc", "mean_acc"]


def test_probability_average_hand_case():
    p = np.array([[[[0.9, 0.4], [0.2, 0.5]], [[0.1, 0.6], [0.8, 0.5]]]])
    q = np.array([[[[0.3, 0.7], [0.3, 0.5]], [[0.7, 0.3], [0.7, 0.5]]]])
    avg = average_probs([p, q])
    np.testing.assert_allclose(avg[0, 0], [[0.6, 0.55], [0.25, 0.5]])
    # last pixel ties at 0.5/0.5 -> lowest class
    np.testing.assert_array_equal(argmax_labels(avg)[0], [[0, 0], [1, 0]])


class _Fixed:
    """Stub model returning scores that depend only on pixel colour."""

    def __call__(self, images):
        from refinery.engine import Tensor
        x = np.asarray(images)
        return Tensor(np.concatenate([x[:, :1] * 4, x[:, 1:2] * 4], axis=1))


def test_single_scale_multiscale_equals_predict(rng):
    imgs = rng.random((2, 3, 20, 12))
    np.testing.assert_array_equal(multiscale_predict(_Fixed(), imgs, [1.0]), predict(_Fixed(), imgs))


def test_multiscale_probabilities_normalised(rng):
    from refinery.evaluate import multiscale_probs
    p = multiscale_probs(_Fixed(), rng.random((1, 3, 16, 16)), [0.8, 1.0, 1.2])
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 5))
def test_permutation_invariance(seed, k):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, k, (8, 8))
    p = rng.integers(0, k, (8, 8))
    t[rng.random((8, 8)) < 0.1] = 255
    perm = np.append(rng.permutation(k), 0)
    lut = np.zeros(256, dtype=np.int64)
    lut[:k] = perm[:k]
    lut[255] = 255
    a = report(ConfusionMatrix(k).accumulate(p, t))
    b = report(ConfusionMatrix(k).accumulate(lut[p], lut[t]))
    assert a.mean_iou == pytest.approx(b.mean_iou, abs=1e-12) or (np.isnan(a.mean_iou) and np.isnan(b.mean_iou))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_accumulation_order_invariance(seed):
    rng = np.random.default_rng(seed)
    pairs = [(rng.integers(0, 3, (5, 5)), rng.choice([0, 1, 2, 255], (5, 5))) for _ in range(6)]
    a = ConfusionMatrix(3)
    for p, t in pairs:
        a.accumulate(p, t)
    b = ConfusionMatrix(3)
    for i in rng.permutation(6):
        b.accumulate(*pairs[i])
    np.testing.assert_array_equal(a.counts, b.counts)
    halves = ConfusionMatrix(3).accumulate(*pairs[0]).merge(ConfusionMatrix(3).accumulate(*pairs[1]))
    both = ConfusionMatrix(3).accumulate(*pairs[0]).accumulate(*pairs[1])
    np.testing.assert_array_equal(halves.counts, both.counts)
