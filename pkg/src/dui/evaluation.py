"""Classification metrics and before/after distribution-shift diagnostics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import models
from .independence import IndependenceConfig, delta_p
from .models import ModelSpec
from .requests import AppliedRequest


def predicted_classes(probabilities) -> np.ndarray:
    """Argmax per row; ties resolve to the lower class id."""
    return np.argmax(np.asarray(probabilities), axis=1)


def _confusion(pred, true, C: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape or pred.size == 0:
        raise ValueError("need two non-empty class vectors of equal length")
    cm = np.zeros((C, C), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def per_class_f1(pred, true, C: int) -> np.ndarray:
    cm = _confusion(pred, true, C)
    tp = np.diag(cm).astype(np.float64)
    # 2TP + FP + FN == (# predicted as c) + (# actually c)
    denom = (cm.sum(axis=0) + cm.sum(axis=1)).astype(np.float64)
    return np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(pred, true, C: int) -> float:
    return float(np.mean(per_class_f1(pred, true, C)))


def micro_f1(pred, true, C: int) -> float:
    cm = _confusion(pred, true, C)
    # every mistake is one FP and one FN, so micro-F1 reduces to accuracy
    tp = np.trace(cm)
    fp = fn = cm.sum() - tp
    return float(2 * tp / (2 * tp + fp + fn))


def brier(probabilities, true) -> float:
    """Multiclass Brier score, range [0, 2]."""
    P = np.asarray(probabilities, dtype=np.float64)
    onehot = np.zeros_like(P)
    onehot[np.arange(P.shape[0]), np.asarray(true)] = 1.0
    return float(np.mean(np.sum((P - onehot) ** 2, axis=1)))


@dataclass(frozen=True, eq=False)
class EmpiricalDistribution:
    variable: str
    histogram: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.histogram, dtype=np.float64)
        if np.any(h < 0) or abs(h.sum() - 1.0) > 1e-9:
            raise ValueError("histogram must be non-negative and sum to 1")
        object.__setattr__(self, "histogram", h)


def label_distribution(labels, C: int) -> EmpiricalDistribution:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=C)
    return EmpiricalDistribution("label", counts / counts.sum())


@dataclass
class EvalReport:
    macro_f1: float
    micro_f1: float
    brier: float
    runtime_seconds: float
    hsic_shift: float
    mi_shift: float
    method: str
    unlearn_ratio: float
    feature_ratio: float
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


def classification_metrics(probabilities, true, C: int) -> dict:
    pred = predicted_classes(probabilities)
    return {"macro_f1": macro_f1(pred, true, C), "micro_f1": micro_f1(pred, true, C),
            "brier": brier(probabilities, true)}


def shift_report(spec: ModelSpec, theta_before, theta_after, applied: AppliedRequest,
                 independence: IndependenceConfig, loss_indices=None) -> dict:
    """``delta_p`` under nHSIC and plug-in MI plus the two label marginals.

    Dependence is measured over the supervised rows: all rows of the source
    before unlearning vs. the retained rows afterwards.
    """
    source, retained = applied.source, applied.retained
    p_before = models.predict_proba(spec, theta_before, source)
    p_after = models.predict_proba(spec, theta_after, retained)
    rows = np.arange(source.n) if loss_indices is None else np.asarray(loss_indices, dtype=np.int64)
    kept = applied.remap(rows)
    full_view = source.table.subset(rows)
    kept_view = retained.table.subset(kept)
    hsic = delta_p(p_before[rows], p_after[kept], full_view, kept_view, independence, "hsic")
    mi = delta_p(p_before[rows], p_after[kept], full_view, kept_view, independence, "mi")
    C = source.class_count
    return {
        "hsic_shift": hsic,
        "mi_shift": mi,
        "label_histograms": (label_distribution(full_view.labels, C), label_distribution(kept_view.labels, C)),
    }
