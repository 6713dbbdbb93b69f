"""Detection metrics: ROC AUC, TPR at a fixed FPR budget, per-class F1."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import OneClassOnly

REPORT_SCHEMA = 1


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in shape")
    if labels.all() or not labels.any():
        raise OneClassOnly("both positive and negative examples are required")
    return scores, labels


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties counting one half."""
    scores, labels = _split(scores, labels)
    ranks = rankdata(scores)  # average ranks, so ties contribute one half
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def tpr_at_fpr(scores, labels, target_fpr: float) -> tuple[float, float]:
    """``(tpr, threshold)`` at the smallest cutoff whose false positive rate is within budget.

    A score is flagged when ``score >= threshold``; the candidate cutoffs are
    the distinct scores plus ``+inf`` (flag nothing).
    """
    if not 0 < target_fpr < 1:
        raise ValueError("target_fpr must lie strictly between 0 and 1")
    scores, labels = _split(scores, labels)
    cutoffs = np.append(np.unique(scores), np.inf)
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    fp = len(neg) - np.searchsorted(neg, cutoffs, side="left")
    tp = len(pos) - np.searchsorted(pos, cutoffs, side="left")
    ok = np.flatnonzero(fp / len(neg) <= target_fpr)
    i = int(ok[0])  # fp is non-increasing in the cutoff, so this is the smallest admissible one
    return float(tp[i] / len(pos)), float(cutoffs[i])


@dataclass
class F1Report:
    per_class: dict[str, float]
    macro: float
    diagnostics: list[str] = field(default_factory=list)


def f1_score(predicted: Sequence, truth: Sequence, classes: Sequence | None = None) -> F1Report:
    predicted = [str(p) for p in predicted]
    truth = [str(t) for t in truth]
    if len(predicted) != len(truth):
        raise ValueError("predicted and true labels differ in length")
    classes = [str(c) for c in classes] if classes is not None else sorted(set(truth) | set(predicted))
    pred = np.array(predicted)
    true = np.array(truth)
    per_class, notes = {}, []
    for c in classes:
        tp = int(np.sum((pred == c) & (true == c)))
        n_pred = int(np.sum(pred == c))
        n_true = int(np.sum(true == c))
        if n_pred == 0 or n_true == 0 or tp == 0:
            per_class[c] = 0.0
            why = "never predicted" if n_pred == 0 else "absent from truth" if n_true == 0 else "no true positives"
            notes.append(f"class {c!r}: F1 set to 0 ({why})")
            continue
        precision, recall = tp / n_pred, tp / n_true
        per_class[c] = 2 * precision * recall / (precision + recall)
    macro = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return F1Report(per_class, macro, notes)


@dataclass
class EvalReport:
    setting: str
    auc: float | None = None
    tpr_at_1pct: float | None = None
    tpr_at_3pct: float | None = None
    thresholds: dict[str, float] = field(default_factory=dict)
    f1: dict[str, float] | None = None
    macro_f1: float | None = None
    n_files: int = 0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_binary(setting: str, scores, labels) -> EvalReport:
    auc = roc_auc(scores, labels)
    t1, c1 = tpr_at_fpr(scores, labels, 0.01)
    t3, c3 = tpr_at_fpr(scores, labels, 0.03)
    return EvalReport(setting, auc, t1, t3, {"fpr_1pct": c1, "fpr_3pct": c3}, n_files=len(scores))


def evaluate_multiclass(setting: str, predicted, truth, classes=None) -> EvalReport:
    rep = f1_score(predicted, truth, classes)
    return EvalReport(setting, f1=rep.per_class, macro_f1=rep.macro, n_files=len(truth), notes=rep.diagnostics)


def reports_json(reports: Sequence[EvalReport]) -> str:
    return json.dumps({"schema": REPORT_SCHEMA, "rows": [r.to_dict() for r in reports]}, indent=2, default=float)


def _pct(v: float | None) -> str:
    return "-" if v is None else f"{100 * v:.2f}"


def reports_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text table with one row per setting: AUC | 1% | 3% (or macro F1)."""
    multi = any(r.macro_f1 is not None for r in reports)
    head = ["Setting", "Macro F1"] if multi else ["Setting", "AUC", "TPR@1%", "TPR@3%"]
    rows = []
    for r in reports:
        if multi:
            rows.append([r.setting, _pct(r.macro_f1)])
        else:
            rows.append([r.setting, _pct(r.auc), _pct(r.tpr_at_1pct), _pct(r.tpr_at_3pct)])
    widths = [max(len(str(c)) for c in col) for col in zip(head, *rows)]
    fmt = " | ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*head), "-+-".join("-" * w for w in widths)]
    lines += [fmt.format(*row) for row in rows]
    return "\n".join(lines)
