import numpy
import pytest

from densepatch.errors import DataError, FormatError
from densepatch.metrics import ConfusionMatrix, Report, RocCurve
import densepatch.metrics as M

SCORES = [0.9, 0.1, 0.8, 0.7]
LABELS = [1, 0, 0, 1]

def test_confusion_example():
    assert M.confusion(SCORES, LABELS, 0.5) == ConfusionMatrix(tp=2, fp=1, tn=1, fn=0)

def test_threshold_is_inclusive():
    assert M.confusion([0.5], [1], 0.5).tp == 1

def test_rates_and_accuracy():
    cm = M.confusion(SCORES, LABELS, 0.5)
    assert M.fpr_tpr(cm) == (0.5, 1.0)
    assert M.accuracy(cm) == 0.75

def test_rates_need_both_classes():
    with pytest.raises(DataError):
        M.fpr_tpr(M.confusion([0.2, 0.9], [1, 1], 0.5))

def test_bad_inputs():
    with pytest.raises(DataError):
        M.confusion([0.1, 0.2], [1], 0.5)
    with pytest.raises(DataError):
        M.confusion([], [], 0.5)
    with pytest.raises(DataError):
        M.confusion([0.1], [2], 0.5)

def test_roc_example():
    curve = M.roc_curve(SCORES, LABELS)
    assert curve.points[0] == (0.0, 0.0)
    assert curve.points[-1] == (1.0, 1.0)
    assert (0.0, 0.5) in curve.points
    assert (0.5, 1.0) in curve.points
    assert M.auc(curve) == 0.75

def test_tied_scores_give_the_chance_line():
    curve = M.roc_curve([0.4] * 6, [0, 1, 0, 1, 1, 0])
    assert M.auc(curve) == 0.5
    assert M.rank_auc([0.4] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

def test_roc_needs_both_classes():
    with pytest.raises(DataError):
        M.roc_curve([0.1, 0.2], [0, 0])

def test_roc_curve_validation():
    with pytest.raises(ValueError):
        RocCurve(points=[(0, 0), (0.5, 0.2)])
    with pytest.raises(ValueError):
        RocCurve(points=[(0, 0), (0.6, 0.5), (0.4, 0.7), (1, 1)])

def test_trapezoid_matches_pair_counting():
    rng = numpy.random.Generator(numpy.random.PCG64(99))
    for _ in range(500):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        # coarse rounding makes ties common
        scores = numpy.round(rng.uniform(size=n), int(rng.integers(1, 4)))
        assert abs(M.auc(M.roc_curve(scores, labels)) - M.rank_auc(scores, labels)) <= 1e-12

def test_auc_is_rank_based():
    rng = numpy.random.Generator(numpy.random.PCG64(5))
    scores = rng.uniform(size=200)
    labels = (rng.uniform(size=200) < scores).astype(int)
    base = M.auc(M.roc_curve(scores, labels))
    assert M.auc(M.roc_curve(numpy.exp(3 * scores) - 7, labels)) == pytest.approx(base, abs=1e-12)
    assert M.auc(M.roc_curve(scores, 1 - labels)) == pytest.approx(1 - base, abs=1e-12)

def test_separable_scores():
    assert M.auc(M.roc_curve([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0
    assert M.auc(M.roc_curve([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1])) == 0.0

def test_report_round_trip(tmp_path):
    result = M.report(SCORES, LABELS, model='dense')
    assert result.auc_roc == 0.75
    assert result.accuracy == 0.75
    path = tmp_path / 'report.toml'
    result.save(path)
    assert Report.load(path) == result

def test_report_missing_key():
    with pytest.raises(FormatError):
        Report.from_dict({'model': 'dense', 'auc_roc': 0.5})

def test_accuracy_is_one_minus_hamming_error():
    rng = numpy.random.Generator(numpy.random.PCG64(17))
    for _ in range(50):
        n = int(rng.integers(1, 100))
        scores = rng.uniform(size=n)
        labels = rng.integers(0, 2, size=n)
        predicted = (scores >= 0.5).astype(int)
        hamming = numpy.count_nonzero(predicted != labels) / n
        assert M.accuracy(M.confusion(scores, labels, 0.5)) == pytest.approx(1 - hamming, abs=1e-12)

def test_uninformative_scores_give_chance_auc():
    rng = numpy.random.Generator(numpy.random.PCG64(23))
    scores = rng.uniform(size=2000)
    labels = rng.integers(0, 2, size=2000)
    assert abs(M.auc(M.roc_curve(scores, labels)) - 0.5) <= 0.05
