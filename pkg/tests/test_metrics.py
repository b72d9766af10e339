import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ltssl.crp import PseudoLabelBatch
from ltssl.dataset import SampleSet
from ltssl.metrics import (
    PseudoLabelMonitor,
    class_report,
    confusion_matrix,
    head_tail_split,
    pseudo_label_quality,
)


def pl(labels, mask):
    labels = np.asarray(labels)
    return PseudoLabelBatch(labels=labels, mask=np.asarray(mask, dtype=bool),
                            confidences=np.zeros((len(labels), 2)))


def test_perfect_predictions():
    y = np.array([0, 1, 2, 2, 1])
    rep = class_report(confusion_matrix(y, y, 3))
    np.testing.assert_array_equal(rep.f1, 1.0)
    assert rep.accuracy == 1.0 and rep.macro_f1 == 1.0


def test_confusion_example():
    rep = class_report(np.array([[5, 5], [0, 10]]))
    assert rep.recall[0] == 0.5 and rep.precision[0] == 1.0
    assert rep.precision[1] == pytest.approx(10 / 15, abs=1e-15)
    assert rep.f1[0] == pytest.approx(2 * 0.5 / 1.5, abs=1e-15)


def test_constant_predictor():
    y = np.array([0, 1] * 50)
    rep = class_report(confusion_matrix(y, np.zeros(100, dtype=int), 2))
    assert rep.accuracy == 0.5 and rep.recall[1] == 0.0 and rep.f1[1] == 0.0


def test_empty_class_flagged():
    rep = class_report(confusion_matrix([0, 1], [0, 1], 3))
    assert rep.empty.tolist() == [False, False, True]
    assert rep.f1[2] == 0.0


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 6), st.integers(1, 60), st.integers(0, 2**16))
def test_report_identities(C, n, seed):
    rng = np.random.default_rng(seed)
    y, p = rng.integers(0, C, n), rng.integers(0, C, n)
    cm = confusion_matrix(y, p, C)
    rep = class_report(cm)
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(y, minlength=C))
    np.testing.assert_array_equal(rep.support, np.bincount(y, minlength=C))
    assert rep.micro_f1 == pytest.approx(rep.accuracy, abs=1e-12)
    pr = rep.precision + rep.recall
    expect = np.where(pr > 0, 2 * rep.precision * rep.recall / np.where(pr > 0, pr, 1), 0)
    np.testing.assert_allclose(rep.f1, expect, atol=1e-12)


def test_head_tail_split():
    head, tail = head_tail_split([100, 63, 40, 25, 16, 10])
    assert head.tolist() == [0, 1, 2] and tail.tolist() == [3, 4, 5]
    head, tail = head_tail_split([5, 50, 5, 20])
    assert head.tolist() == [1, 3] and tail.tolist() == [0, 2]


def test_pseudo_label_quality_examples():
    head, tail = np.array([0]), np.array([1])
    empty = pseudo_label_quality(pl([0, 1], [False, False]), [0, 1], 2, head, tail)
    assert empty.mask_in_rate == 0.0 and empty.n_masked == 0
    right = pseudo_label_quality(pl([0, 1, 1], [True] * 3), [0, 1, 1], 2, head, tail)
    np.testing.assert_array_equal(right.f1, 1.0)
    toy = pseudo_label_quality(pl([0, 1, 0], [True] * 3), [0, 1, 1], 2, head, tail)
    assert toy.tail_recall == 0.5 and toy.head_recall == 1.0


def test_quality_uses_masked_rows_only():
    head, tail = np.array([0]), np.array([1])
    rep = pseudo_label_quality(pl([0, 0, 1], [True, False, True]), [0, 1, 1], 2, head, tail)
    assert rep.n_masked == 2 and rep.tail_recall == 1.0
    assert rep.mask_in_rate == pytest.approx(2 / 3)


def test_monitor_accumulates_and_round_trips():
    unl = SampleSet(np.zeros((4, 2)), None, np.array([0, 1, 1, 0]))
    mon = PseudoLabelMonitor(unl, 2, [0], [1])
    mon.observe(np.array([0, 1]), pl([0, 1], [True, True]))
    mon.observe(np.array([2, 3]), pl([0, 0], [True, False]))
    rep = mon.report()
    assert rep.n_rows == 4 and rep.n_masked == 3 and rep.tail_recall == 0.5
    other = PseudoLabelMonitor(unl, 2, [0], [1])
    other.load_dict(mon.to_dict())
    np.testing.assert_array_equal(other.cm, mon.cm)
