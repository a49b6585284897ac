"""Challenge metrics: CCC for valence/arousal, macro F1 for expressions and AUs."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .errors import ContractError, DataError
from .losses import ccc_value
from .model import AU_COUNT, EXPR_CLASSES


def ccc_metric(y, yhat) -> float:
    return ccc_value(y, yhat)


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else (2 * tp) / denom


def confusion_counts(true_labels, pred_labels, n_classes: int) -> np.ndarray:
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(pred_labels, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ContractError(f"label arrays differ in length: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise DataError("macro F1 of an empty label set")
    if min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= n_classes:
        raise ContractError(f"labels must lie in 0..{n_classes - 1}")
    return np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def macro_f1_from_confusion(cm: np.ndarray) -> float:
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    return float(np.mean([_f1(int(a), int(b), int(c)) for a, b, c in zip(tp, fp, fn)]))


def macro_f1(true_labels, pred_labels, n_classes: int) -> float:
    """Unweighted mean of per-class F1; a class never seen nor predicted scores 0."""
    return macro_f1_from_confusion(confusion_counts(true_labels, pred_labels, n_classes))


def au_counts(true_flags, pred_flags) -> np.ndarray:
    """``K x 3`` array of (tp, fp, fn) per action unit."""
    t = np.asarray(true_flags, dtype=bool)
    p = np.asarray(pred_flags, dtype=bool)
    if t.shape != p.shape or t.ndim != 2:
        raise ContractError(f"AU flag arrays must be equal N x K, got {t.shape} and {p.shape}")
    if t.shape[0] == 0:
        raise DataError("AU F1 of an empty label set")
    return np.stack([(t & p).sum(0), (~t & p).sum(0), (t & ~p).sum(0)], axis=1)


def au_macro_f1(true_flags, pred_flags) -> float:
    """Mean over action units of the positive-class F1."""
    return float(np.mean([_f1(*map(int, row)) for row in au_counts(true_flags, pred_flags)]))


@dataclass
class MomentAccumulator:
    """Exact running sums for CCC, mergeable in any order."""

    n: int = 0
    sx: Fraction = Fraction(0)
    sy: Fraction = Fraction(0)
    sxx: Fraction = Fraction(0)
    syy: Fraction = Fraction(0)
    sxy: Fraction = Fraction(0)

    def update(self, y, yhat) -> None:
        for a, b in zip(np.asarray(y, dtype=np.float64).tolist(), np.asarray(yhat, dtype=np.float64).tolist()):
            fa, fb = Fraction(a), Fraction(b)
            self.n += 1
            self.sx += fa
            self.sy += fb
            self.sxx += fa * fa
            self.syy += fb * fb
            self.sxy += fa * fb

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        return MomentAccumulator(self.n + other.n, self.sx + other.sx, self.sy + other.sy,
                                 self.sxx + other.sxx, self.syy + other.syy, self.sxy + other.sxy)

    def ccc(self) -> float:
        if self.n < 2:
            raise DataError("CCC needs at least two samples")
        n = self.n
        mx, my = self.sx / n, self.sy / n
        cov = self.sxy / n - mx * my
        vx = self.sxx / n - mx * mx
        vy = self.syy / n - my * my
        denom = vx + vy + (mx - my) ** 2
        if denom == 0:
            return 1.0
        return float(2 * cov / denom)


@dataclass
class MetricsAccumulator:
    """Sufficient statistics for a :class:`MetricsReport`; shards merge exactly."""

    valence: MomentAccumulator = field(default_factory=MomentAccumulator)
    arousal: MomentAccumulator = field(default_factory=MomentAccumulator)
    expr_cm: np.ndarray = field(default_factory=lambda: np.zeros((EXPR_CLASSES, EXPR_CLASSES), dtype=np.int64))
    au_cm: np.ndarray = field(default_factory=lambda: np.zeros((AU_COUNT, 3), dtype=np.int64))
    au_support: np.ndarray = field(default_factory=lambda: np.zeros(AU_COUNT, dtype=np.int64))
    n_au: int = 0

    def add_va(self, y: np.ndarray, yhat: np.ndarray) -> None:
        self.valence.update(y[:, 0], yhat[:, 0])
        self.arousal.update(y[:, 1], yhat[:, 1])

    def add_expr(self, y: np.ndarray, pred: np.ndarray) -> None:
        if len(y):
            self.expr_cm += confusion_counts(y, pred, EXPR_CLASSES)

    def add_au(self, y: np.ndarray, pred: np.ndarray) -> None:
        if len(y):
            self.au_cm += au_counts(y, pred)
            self.au_support += np.asarray(y, dtype=np.int64).sum(axis=0)
            self.n_au += len(y)

    def merge(self, other: "MetricsAccumulator") -> "MetricsAccumulator":
        return MetricsAccumulator(
            self.valence.merge(other.valence),
            self.arousal.merge(other.arousal),
            self.expr_cm + other.expr_cm,
            self.au_cm + other.au_cm,
            self.au_support + other.au_support,
            self.n_au + other.n_au,
        )

    def report(self) -> "MetricsReport":
        if self.valence.n < 2 or self.expr_cm.sum() == 0 or self.n_au == 0:
            raise DataError("split lacks samples for at least one of VA, EXPR, AU")
        cv, ca = self.valence.ccc(), self.arousal.ccc()
        va = (cv + ca) / 2.0
        ef = macro_f1_from_confusion(self.expr_cm)
        af = float(np.mean([_f1(*map(int, row)) for row in self.au_cm]))
        return MetricsReport(
            ccc_valence=cv,
            ccc_arousal=ca,
            va_score=va,
            expr_macro_f1=ef,
            au_macro_f1=af,
            mtl_score=va + ef + af,
            n_va=self.valence.n,
            n_expr=int(self.expr_cm.sum()),
            n_au=self.n_au,
            expr_class_counts=self.expr_cm.sum(axis=1).tolist(),
            au_positive_counts=self.au_support.tolist(),
        )


@dataclass
class MetricsReport:
    ccc_valence: float
    ccc_arousal: float
    va_score: float
    expr_macro_f1: float
    au_macro_f1: float
    mtl_score: float
    n_va: int = 0
    n_expr: int = 0
    n_au: int = 0
    expr_class_counts: Optional[list] = None
    au_positive_counts: Optional[list] = None

    def task_scores(self) -> dict:
        return {"VA": self.va_score, "EXPR": self.expr_macro_f1, "AU": self.au_macro_f1, "MTL": self.mtl_score}

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, list):
                value = " ".join(str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key}: {value}")
        return "\n".join(lines) + "\n"
