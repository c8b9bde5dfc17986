import collections
import math

import attr
import numpy
import toml

from densepatch.errors import DataError, FormatError

# Label 1 is the positive (cancer) class. A sample is predicted positive
# when its score is >= the threshold.

def _non_negative(instance, attribute, value):
    if value < 0:
        raise ValueError('{} must be non-negative: {}'.format(attribute.name, value))

@attr.s(frozen=True)
class ConfusionMatrix:
    tp = attr.ib(converter=int, validator=_non_negative)
    fp = attr.ib(converter=int, validator=_non_negative)
    tn = attr.ib(converter=int, validator=_non_negative)
    fn = attr.ib(converter=int, validator=_non_negative)

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def positives(self):
        return self.tp + self.fn

    @property
    def negatives(self):
        return self.fp + self.tn

def _as_inputs(scores, labels):
    scores = numpy.asarray(scores, dtype=numpy.float64).reshape(-1)
    labels = numpy.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise DataError('{} scores but {} labels'.format(scores.size, labels.size))
    if scores.size == 0:
        raise DataError('no samples to evaluate')
    if not numpy.all((labels == 0) | (labels == 1)):
        raise DataError('labels must be 0 or 1')
    return scores, labels.astype(numpy.int64)

def confusion(scores, labels, threshold):
    scores, labels = _as_inputs(scores, labels)
    predicted = scores >= threshold
    positive = labels == 1
    return ConfusionMatrix(
        tp=numpy.sum(predicted & positive),
        fp=numpy.sum(predicted & ~positive),
        tn=numpy.sum(~predicted & ~positive),
        fn=numpy.sum(~predicted & positive),
    )

def fpr_tpr(cm):
    if cm.negatives == 0 or cm.positives == 0:
        raise DataError('FPR and TPR need both classes present (tp+fn={}, fp+tn={})'.format(cm.positives, cm.negatives))
    return cm.fp / (cm.fp + cm.tn), cm.tp / (cm.tp + cm.fn)

def accuracy(cm):
    # correct fraction; the total alone is just the sample count
    if cm.total == 0:
        raise DataError('accuracy of an empty confusion matrix')
    return (cm.tp + cm.tn) / cm.total

def _check_points(instance, attribute, points):
    if len(points) < 2:
        raise ValueError('a ROC curve needs at least its two endpoints')
    if points[0] != (0.0, 0.0) or points[-1] != (1.0, 1.0):
        raise ValueError('a ROC curve runs from (0, 0) to (1, 1), got {} to {}'.format(points[0], points[-1]))
    for fpr, tpr in points:
        if not (0 <= fpr <= 1 and 0 <= tpr <= 1):
            raise ValueError('ROC point ({}, {}) outside the unit square'.format(fpr, tpr))
    fprs = [p[0] for p in points]
    if any(b < a for a, b in zip(fprs, fprs[1:])):
        raise ValueError('FPR must be non-decreasing along a ROC curve')

@attr.s(frozen=True)
class RocCurve:
    # points[i] belongs to thresholds[i]; the last point is the (1, 1) endpoint
    points = attr.ib(converter=lambda ps: tuple((float(a), float(b)) for a, b in ps), validator=_check_points)
    thresholds = attr.ib(converter=tuple, factory=tuple)

def roc_curve(scores, labels):
    scores, labels = _as_inputs(scores, labels)
    positives = int(labels.sum())
    negatives = labels.size - positives
    if positives == 0 or negatives == 0:
        raise DataError('a ROC curve needs both classes present')
    order = numpy.argsort(-scores, kind='mergesort')
    ranked = scores[order]
    # last index of each run of tied scores: one threshold per distinct value
    last = numpy.r_[numpy.nonzero(numpy.diff(ranked))[0], ranked.size - 1]
    tp = numpy.cumsum(labels[order])[last]
    fp = last + 1 - tp
    points = [(0.0, 0.0)]
    points += [(f / negatives, t / positives) for f, t in zip(fp, tp)]
    points.append((1.0, 1.0))
    thresholds = [math.inf] + [float(s) for s in ranked[last]]
    return RocCurve(points=points, thresholds=thresholds)

def auc(curve):
    fpr = numpy.array([p[0] for p in curve.points])
    tpr = numpy.array([p[1] for p in curve.points])
    return float(numpy.sum(numpy.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))

def rank_auc(scores, labels):
    """Fraction of positive/negative pairs ordered correctly, ties counted half."""
    scores, labels = _as_inputs(scores, labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise DataError('rank AUC needs both classes present')
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (pos.size * neg.size))

@attr.s
class Report:
    model = attr.ib()
    auc_roc = attr.ib()
    accuracy = attr.ib()
    confusion = attr.ib()
    threshold = attr.ib(default=0.5)

    def to_dict(self):
        data = collections.OrderedDict()
        data['model'] = self.model
        data['auc_roc'] = self.auc_roc
        data['accuracy'] = self.accuracy
        data['threshold'] = self.threshold
        for k in ['tp', 'fp', 'tn', 'fn']:
            data[k] = getattr(self.confusion, k)
        return data

    def dumps(self):
        return toml.dumps(self.to_dict())

    def save(self, path):
        with open(str(path), 'w') as f:
            f.write(self.dumps())

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                model=data['model'],
                auc_roc=data['auc_roc'],
                accuracy=data['accuracy'],
                threshold=data.get('threshold', 0.5),
                confusion=ConfusionMatrix(data['tp'], data['fp'], data['tn'], data['fn']),
            )
        except KeyError as e:
            raise FormatError('report is missing key {}'.format(e))

    @classmethod
    def load(cls, path):
        with open(str(path)) as f:
            return cls.from_dict(toml.load(f))

def report(scores, labels, model, threshold=0.5):
    cm = confusion(scores, labels, threshold)
    return Report(
        model=model,
        auc_roc=auc(roc_curve(scores, labels)),
        accuracy=accuracy(cm),
        confusion=cm,
        threshold=threshold,
    )
