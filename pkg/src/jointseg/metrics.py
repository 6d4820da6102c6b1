"""
Confusion-matrix based evaluation for point segmentation and volume completion.

IoU ratios are formed from integer counts with exact fractions and converted to
float at the end, so hand-checkable fixtures compare equal bit for bit.
"""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ContractError
from .geometry import INVALID_LABEL


class ConfusionMatrix:
    """(C+1) x (C+1) counts, row = truth, column = prediction, plus an ignored tally."""

    def __init__(self, num_classes):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
        self.ignored = 0

    def update(self, truth, pred, valid=None):
        truth = np.asarray(truth, dtype=np.int64).reshape(-1)
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        if truth.shape != pred.shape:
            raise ContractError(f"{len(pred)} predictions for {len(truth)} truths")
        valid = np.ones(len(truth), dtype=bool) if valid is None else np.asarray(valid).reshape(-1)
        n = self.num_classes + 1
        t, p = truth[valid], pred[valid]
        if len(t) and (t.min() < 0 or t.max() >= n or p.min() < 0 or p.max() >= n):
            raise ContractError(f"labels outside 0..{self.num_classes}")
        self.counts += np.bincount(t * n + p, minlength=n * n).reshape(n, n)
        self.ignored += int((~valid).sum())
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ContractError("cannot merge matrices with different class counts")
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        out.ignored = self.ignored + other.ignored
        return out

    __add__ = merge

    @property
    def total(self):
        return int(self.counts.sum()) + self.ignored

    def class_iou(self, classes):
        """Exact IoU per class; None where the class is absent from truth and prediction."""
        out = {}
        for c in classes:
            tp = int(self.counts[c, c])
            fp = int(self.counts[:, c].sum()) - tp
            fn = int(self.counts[c, :].sum()) - tp
            out[c] = Fraction(tp, tp + fp + fn) if tp + fp + fn else None
        return out


@dataclass
class IoUResult:
    per_class: dict
    miou: float

    def as_dict(self, prefix):
        d = {f"{prefix}.miou": self.miou}
        for c, v in self.per_class.items():
            d[f"{prefix}.iou.{c}"] = v
        return d


def _mean_iou(cm, classes):
    exact = cm.class_iou(classes)
    present = [v for v in exact.values() if v is not None]
    miou = float(sum(present, Fraction(0)) / len(present)) if present else float("nan")
    return IoUResult({c: (None if v is None else float(v)) for c, v in exact.items()}, miou)


def seg_confusion(pred, truth, num_classes):
    truth = np.asarray(truth)
    return ConfusionMatrix(num_classes).update(truth, pred, valid=truth != 0)


def seg_miou(pred, truth, num_classes, cm=None):
    """Per-point IoU over classes 1..C, ignoring truth label 0."""
    cm = cm if cm is not None else seg_confusion(pred, truth, num_classes)
    return _mean_iou(cm, range(1, num_classes + 1))


def _labels_of(volume):
    return np.asarray(getattr(volume, "labels", volume))


def _check_pair(pred, gt):
    if hasattr(pred, "spec") and hasattr(gt, "spec") and pred.spec != gt.spec:
        raise ContractError("prediction and ground truth volumes have different layouts")
    p, g = _labels_of(pred), _labels_of(gt)
    if p.shape != g.shape:
        raise ContractError(f"volume shapes differ: {p.shape} vs {g.shape}")
    return p, g


def ssc_confusion(pred, gt, num_classes):
    p, g = _check_pair(pred, gt)
    return ConfusionMatrix(num_classes).update(g, p, valid=g != INVALID_LABEL)


@dataclass
class CompletionScores:
    precision: float
    recall: float
    iou: float


def sc_metrics(pred, gt, cm=None):
    """Occupancy precision / recall / IoU over observed cells, semantic labels ignored."""
    if cm is None:
        p, g = _check_pair(pred, gt)
        valid = g != INVALID_LABEL
        po, go = p[valid] > 0, g[valid] > 0
        tp = int((po & go).sum())
        fp = int((po & ~go).sum())
        fn = int((~po & go).sum())
    else:
        c = cm.counts
        tp = int(c[1:, 1:].sum())
        fp = int(c[0, 1:].sum())
        fn = int(c[1:, 0].sum())

    def ratio(a, b):
        return float(Fraction(a, b)) if b else float("nan")

    return CompletionScores(ratio(tp, tp + fp), ratio(tp, tp + fn), ratio(tp, tp + fp + fn))


def ssc_miou(pred, gt, num_classes, cm=None):
    """Voxel IoU over semantic classes 1..C on observed cells; the empty class is not averaged."""
    cm = cm if cm is not None else ssc_confusion(pred, gt, num_classes)
    return _mean_iou(cm, range(1, num_classes + 1))


def format_report(values):
    """Flat two-column text table."""
    width = max((len(k) for k in values), default=0)
    lines = [f"{'metric'.ljust(width)}  value"]
    for k, v in values.items():
        lines.append(f"{k.ljust(width)}  {_fmt(v)}")
    return "\n".join(lines) + "\n"


def format_keyvalue(values):
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in values.items())


def _fmt(v):
    if v is None:
        return "absent"
    if isinstance(v, float):
        return repr(v)
    return str(v)
