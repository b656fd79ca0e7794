"""Evaluation metrics for grading and vessel segmentation.

Grades live on the 0..4 scale. For the binary screening metrics
(sensitivity, specificity, F1 on grades) grades {0, 1} count as negative and
{2, 3, 4} as positive.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

NUM_GRADES = 5
POSITIVE_FROM_GRADE = 2


class UndefinedMetricWarning(UserWarning):
    """Raised (as a warning) when a ratio metric hits 0/0 and is reported as 0."""


@dataclass
class MetricsReport:
    qwk: Optional[float]
    accuracy: float
    f1: float
    sensitivity: Optional[float]
    specificity: Optional[float]
    confusion: list
    n: int
    auc: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self, decimals: Optional[int] = None) -> dict:
        """Plain-dict form; ``decimals`` rounds floats for human-facing JSON."""
        d = asdict(self)
        if decimals is None:
            return d

        def rnd(v):
            return round(v, decimals) if isinstance(v, float) else v

        for k in ("qwk", "accuracy", "f1", "sensitivity", "specificity", "auc", "n"):
            d[k] = rnd(d[k])
        d["confusion"] = [[rnd(c) for c in row] for row in d["confusion"]]
        d["extra"] = {k: rnd(v) for k, v in d["extra"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def is_complete(self) -> bool:
        """True when every metric field carries a value."""
        return all(getattr(self, k) is not None for k in
                   ("qwk", "accuracy", "f1", "sensitivity", "specificity", "auc"))


def _as_labels(truth, pred) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(truth).ravel()
    p = np.asarray(pred).ravel()
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.size} truth vs {p.size} predictions")
    if t.size == 0:
        raise ValueError("metrics need at least one sample")
    return t.astype(np.int64), p.astype(np.int64)


def confusion_matrix(truth, pred, num_classes: int = NUM_GRADES) -> np.ndarray:
    """Counts, rows indexed by truth and columns by prediction."""
    t, p = _as_labels(truth, pred)
    if t.min() < 0 or p.min() < 0 or t.max() >= num_classes or p.max() >= num_classes:
        raise ValueError(f"labels must lie in 0..{num_classes - 1}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def kappa_from_confusion(cm: np.ndarray) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    k = cm.shape[0]
    n = cm.sum()
    idx = np.arange(k)
    w = (idx[:, None] - idx[None, :]) ** 2 / (k - 1) ** 2
    expected = np.outer(cm.sum(axis=1), cm.sum(axis=0)) / n
    num = (w * cm).sum()
    den = (w * expected).sum()
    if den == 0:
        # Only reachable when both raters give one identical constant label.
        if np.allclose(cm, expected):
            return 1.0
        raise ValueError("quadratic weighted kappa undefined: zero expected disagreement")
    return float(1.0 - num / den)


def quadratic_weighted_kappa(truth, pred, num_classes: int = NUM_GRADES) -> float:
    """Cohen's kappa with quadratic weights ``(i - j)**2 / (K - 1)**2``.

    Two identical constant raters give 1.0 by convention.
    """
    return kappa_from_confusion(confusion_matrix(truth, pred, num_classes))


def _binary_counts(truth, pred) -> tuple[int, int, int, int]:
    t = np.asarray(truth).astype(bool)
    p = np.asarray(pred).astype(bool)
    if t.shape != p.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {p.shape}")
    tp = int(np.count_nonzero(t & p))
    tn = int(np.count_nonzero(~t & ~p))
    fp = int(np.count_nonzero(~t & p))
    fn = int(np.count_nonzero(t & ~p))
    return tp, tn, fp, fn


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


def binarize_grades(grades) -> np.ndarray:
    return np.asarray(grades) >= POSITIVE_FROM_GRADE


def sensitivity_specificity(truth, pred) -> tuple[Optional[float], Optional[float]]:
    """Screening sensitivity and specificity on grades.

    A ratio whose denominator is empty (no positives, or no negatives, in the
    truth) comes back as ``None`` rather than 0.
    """
    t, p = _as_labels(truth, pred)
    tp, tn, fp, fn = _binary_counts(binarize_grades(t), binarize_grades(p))
    return _ratio(tp, tp + fn), _ratio(tn, tn + fp)


def f1_score(truth, pred) -> float:
    """``2TP / (2TP + FP + FN)`` on binary labels or rasters.

    When there are no positives in either input the score is 0 and an
    :class:`UndefinedMetricWarning` is emitted.
    """
    tp, _, fp, fn = _binary_counts(truth, pred)
    den = 2 * tp + fp + fn
    if den == 0:
        warnings.warn("F1 is 0/0 (no positives in truth or prediction); reporting 0.0",
                      UndefinedMetricWarning, stacklevel=2)
        return 0.0
    return 2 * tp / den


def pixel_auc(truth, scores) -> float:
    """ROC AUC via the rank-sum statistic; tied scores get average ranks."""
    t = np.asarray(truth).ravel().astype(bool)
    s = np.asarray(scores, dtype=np.float64).ravel()
    if t.shape != s.shape:
        raise ValueError(f"shape mismatch: {np.shape(truth)} vs {np.shape(scores)}")
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: truth contains a single class")
    ranks = rankdata(s)
    u = ranks[t].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def full_report(truth, pred, scores=None, num_classes: int = NUM_GRADES) -> MetricsReport:
    """Grading report.

    ``f1`` is the binary F1 under the screening split. ``scores``, when given,
    are per-sample positive-class scores (e.g. P(grade >= 2)) and feed ``auc``.
    """
    cm = confusion_matrix(truth, pred, num_classes)
    t, p = _as_labels(truth, pred)
    sens, spec = sensitivity_specificity(t, p)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UndefinedMetricWarning)
        f1 = f1_score(binarize_grades(t), binarize_grades(p))
    auc = None
    if scores is not None:
        bt = binarize_grades(t)
        if 0 < bt.sum() < bt.size:
            auc = pixel_auc(bt, scores)
    return MetricsReport(
        qwk=kappa_from_confusion(cm),
        accuracy=float(np.trace(cm) / cm.sum()),
        f1=float(f1),
        sensitivity=sens,
        specificity=spec,
        auc=auc,
        confusion=cm.tolist(),
        n=int(cm.sum()),
    )


def segmentation_report(truth, probabilities, threshold: float = 0.5) -> MetricsReport:
    """Pixelwise report; ``qwk`` is the two-class kappa, confusion is 2x2."""
    t = np.asarray(truth).astype(bool).ravel()
    prob = np.asarray(probabilities, dtype=np.float64).ravel()
    p = prob > threshold
    tp, tn, fp, fn = _binary_counts(t, p)
    cm = np.array([[tn, fp], [fn, tp]], dtype=np.int64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UndefinedMetricWarning)
        f1 = f1_score(t, p)
    auc = pixel_auc(t, prob) if 0 < t.sum() < t.size else None
    return MetricsReport(
        qwk=kappa_from_confusion(cm),
        accuracy=float((tp + tn) / t.size),
        f1=float(f1),
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        auc=auc,
        confusion=cm.tolist(),
        n=int(t.size),
    )


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Fold average: arithmetic mean of every scalar and of the confusion cells.

    A scalar that is missing in any fold is missing in the mean.
    """
    if not reports:
        raise ValueError("no reports to average")

    def avg(name):
        vals = [getattr(r, name) for r in reports]
        if any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    confusion = np.mean([np.asarray(r.confusion, dtype=np.float64) for r in reports], axis=0)
    return MetricsReport(
        qwk=avg("qwk"),
        accuracy=avg("accuracy"),
        f1=avg("f1"),
        sensitivity=avg("sensitivity"),
        specificity=avg("specificity"),
        auc=avg("auc"),
        confusion=confusion.tolist(),
        n=float(np.mean([r.n for r in reports])),
        extra={"folds": len(reports)},
    )
