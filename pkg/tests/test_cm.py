import os
import csv
import numpy as np
import pytest
from nlss.utils import DataError, Offsets
from nlss.confusion import ConfusionMatrix


Y_TRUE = [2, 0, 2, 2, 0, 1, 3, 1, 3, 3, 3, 3, 4]
Y_PRED = [0, 0, 2, 2, 0, 2, 3, 3, 3, 1, 3, 2, 4]
LABELS = ["0", "1", "2", "3", "4"]


CLASS_PREC = [0.666667, 0.0, 0.5, 0.75, 1.0]
CLASS_RECALL = [1.0, 0.0, 0.666667, 0.6, 1.0]
CLASS_F1 = [0.8, 0.0, 0.571429, 0.666667, 1.0]
CLASS_SUPPORT = [2, 2, 3, 5, 1]
TOL = 1e-6


def make_mc_cm():
    cm = ConfusionMatrix(LABELS)
    for y_t, y_p in zip(Y_TRUE, Y_PRED):
        cm.add(y_t, y_p)
    return cm


def make_small_cm():
    cm = ConfusionMatrix(2)
    cm.add_maps(np.array([0, 0, 1, 1]), np.array([0, 0, 0, 1]))
    return cm


def test_create_cm():
    gold = make_mc_cm()
    cm = ConfusionMatrix.create(Y_TRUE, Y_PRED)
    np.testing.assert_equal(gold._cm, cm._cm)


def test_add_maps_matches_add():
    cm = ConfusionMatrix(5)
    cm.add_maps(np.array(Y_TRUE).reshape(1, 13), np.array(Y_PRED).reshape(1, 13))
    np.testing.assert_equal(cm.counts, make_mc_cm().counts)


def test_mc_support():
    cm = make_mc_cm()
    np.testing.assert_allclose(cm.get_support(), CLASS_SUPPORT, TOL)


def test_mc_precision():
    np.testing.assert_allclose(make_mc_cm().get_precision(), CLASS_PREC, TOL)


def test_mc_recall():
    cm = make_mc_cm()
    np.testing.assert_allclose(cm.get_recall(), CLASS_RECALL, TOL)
    np.testing.assert_allclose(cm.get_mean_recall(), 0.65333333, TOL)


def test_mc_f1():
    np.testing.assert_allclose(make_mc_cm().get_class_f(), CLASS_F1, TOL)


def test_small_metrics():
    m = make_small_cm().get_all_metrics()
    np.testing.assert_allclose(m["oa"], 0.75, TOL)
    np.testing.assert_allclose(m["aa"], 0.75, TOL)
    np.testing.assert_allclose(m["miou"], 0.583333, TOL)
    np.testing.assert_allclose(m["mf1"], 0.733333, TOL)


def test_perfect_prediction():
    labels = np.array([[0, 1], [2, 2]])
    m = ConfusionMatrix.create(labels, labels, 3).get_all_metrics()
    for v in m.values():
        np.testing.assert_allclose(v, 1.0, TOL)


def test_absent_class_not_averaged():
    cm = ConfusionMatrix(3)
    cm.add_maps(np.array([0, 1]), np.array([0, 1]))
    assert cm.get_mean_iou() == 1.0
    assert cm.get_mean_recall() == 1.0


def test_predicted_only_class_counts_for_iou():
    cm = ConfusionMatrix(3)
    cm.add_maps(np.array([0, 0]), np.array([0, 2]))
    np.testing.assert_allclose(cm.get_mean_recall(), 0.5, TOL)
    np.testing.assert_allclose(cm.get_mean_iou(), 0.25, TOL)


def test_unlabeled_skipped():
    cm = ConfusionMatrix(2)
    cm.add_maps(np.array([0, Offsets.UNLABELED]), np.array([0, 1]))
    assert cm.get_total() == 1


def test_empty_is_zero():
    assert ConfusionMatrix(2).get_all_metrics() == {"oa": 0.0, "aa": 0.0, "miou": 0.0, "mf1": 0.0}


def test_bad_maps():
    cm = ConfusionMatrix(2)
    with pytest.raises(DataError):
        cm.add_maps(np.array([0, 1]), np.array([0]))
    with pytest.raises(DataError):
        cm.add_maps(np.array([0, 1]), np.array([0, 2]))


def test_iadd_and_reset():
    cm = make_small_cm()
    cm += make_small_cm()
    assert cm.get_total() == 8
    cm.reset()
    assert cm.get_total() == 0


def test_dict_labels():
    cm = ConfusionMatrix({0: "water", 1: "forest"})
    assert cm.labels == ["water", "forest"]
    assert "forest" in str(cm)


def test_save(tmpdir):
    outfile = os.path.join(str(tmpdir), "confusion.csv")
    make_small_cm().save(outfile)
    with open(outfile) as f:
        rows = list(csv.reader(f))
    assert rows == [["labels", "0", "1"], ["0", "2", "0"], ["1", "1", "1"]]
