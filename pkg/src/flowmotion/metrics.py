"""Binary classification metrics with Moving as the positive class."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Sequence

from .errors import UndefinedMetricError
from .labeling import MotionLabel


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(preds: Sequence[MotionLabel], truths: Sequence[MotionLabel]) -> Confusion:
    if len(preds) != len(truths):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(truths)} truths")
    if not preds:
        raise ValueError("cannot evaluate an empty prediction list")
    tp = fp = fn = tn = 0
    for p, t in zip(preds, truths):
        p_pos = p is MotionLabel.MOVING
        t_pos = t is MotionLabel.MOVING
        if p_pos and t_pos:
            tp += 1
        elif p_pos:
            fp += 1
        elif t_pos:
            fn += 1
        else:
            tn += 1
    return Confusion(tp, fp, fn, tn)


def precision(c: Confusion) -> float:
    """Precision in percent."""
    if c.tp + c.fp == 0:
        raise UndefinedMetricError("precision undefined: no positive predictions")
    return 100.0 * c.tp / (c.tp + c.fp)


def recall(c: Confusion) -> float:
    """Recall in percent."""
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("recall undefined: no positive ground truth")
    return 100.0 * c.tp / (c.tp + c.fn)


def f1_from_pr(p: float, r: float) -> float:
    if p + r == 0:
        raise UndefinedMetricError("F1 undefined: precision and recall are both zero")
    return 2.0 * p * r / (p + r)


def f1(c: Confusion) -> float:
    """Harmonic mean of precision and recall, in percent."""
    return f1_from_pr(precision(c), recall(c))


def report(c: Confusion) -> Dict[str, object]:
    """JSON-ready metrics; undefined metrics are reported as ``None``."""
    out: Dict[str, object] = {"tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn}
    for key, fn_ in (("precision_pct", precision), ("recall_pct", recall), ("f1_pct", f1)):
        try:
            out[key] = fn_(c)
        except UndefinedMetricError:
            out[key] = None
    return out
