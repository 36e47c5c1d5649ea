"""Turn and intent evaluation: P/R/F1, rank AUC, UAR, per-intent breakdowns, switch-type recall."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .corpus import IntentClass, SwitchType, TurnLabel


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


@dataclass(frozen=True)
class PRF:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    excluded: tuple[int, ...] = ()


def prf_per_class(confusion: np.ndarray) -> PRF:
    """Per-class precision/recall/F1 and their macro averages.

    Zero denominators give 0. A class that is neither present nor predicted is
    reported with zeros and left out of the macro averages.
    """
    cm = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(cm)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        recall = np.where(true_tot > 0, tp / true_tot, 0.0)
        # 2TP / (2TP + FP + FN): the harmonic mean from counts, in one rounding step
        denom = pred_tot + true_tot
        f1 = np.where(tp > 0, 2 * tp / denom, 0.0)
    active = (pred_tot > 0) | (true_tot > 0)
    excluded = tuple(int(i) for i in np.flatnonzero(~active))
    if not active.any():
        return PRF(precision, recall, f1, 0.0, 0.0, 0.0, excluded)
    return PRF(precision, recall, f1, float(precision[active].mean()), float(recall[active].mean()),
               float(f1[active].mean()), excluded)


def macro_f1(y_true, y_pred, n_classes: int = 2) -> float:
    return prf_per_class(confusion_matrix(y_true, y_pred, n_classes)).macro_f1


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counting one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need both positive and negative examples")
    ranks = stats.rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_class_recall(confusion: np.ndarray) -> np.ndarray:
    cm = np.asarray(confusion, dtype=np.float64)
    support = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(support > 0, np.diag(cm) / support, np.nan)


def uar(confusion: np.ndarray) -> float:
    """Unweighted average recall over classes that have support."""
    rec = per_class_recall(confusion)
    if np.isnan(rec).all():
        return float("nan")
    return float(np.nanmean(rec))


def per_intent_breakdown(turn_pred, turn_true, intent_true, intent_pred=None) -> dict[str, dict]:
    """F1(switch), F1(hold) over each true-intent subset, plus the intent head's per-class recall.

    Intents with no examples get ``{"absent": True}``.
    """
    turn_pred, turn_true, intent_true = map(np.asarray, (turn_pred, turn_true, intent_true))
    intent_rec = None
    if intent_pred is not None:
        intent_rec = per_class_recall(confusion_matrix(intent_true, intent_pred, len(IntentClass)))
    rows = {}
    for c in IntentClass:
        sel = intent_true == c
        if not sel.any():
            rows[c.label] = {"absent": True}
            continue
        prf = prf_per_class(confusion_matrix(turn_true[sel], turn_pred[sel], 2))
        row = {
            "absent": False,
            "n": int(sel.sum()),
            "f1_switch": float(prf.f1[TurnLabel.SWITCH]),
            "f1_hold": float(prf.f1[TurnLabel.HOLD]),
        }
        if intent_rec is not None:
            row["intent_acc"] = float(intent_rec[c])
        rows[c.label] = row
    return rows


def switch_recall_by_type(turn_pred, turn_true, types: Sequence) -> tuple[float | None, float | None]:
    """Switch recall over smooth and over overlapping true switches (None when a type is absent)."""
    turn_pred, turn_true = np.asarray(turn_pred), np.asarray(turn_true)
    types = np.array([None if t is None else SwitchType(t).value for t in types], dtype=object)
    out = []
    for kind in (SwitchType.SMOOTH, SwitchType.OVERLAPPING):
        sel = (turn_true == TurnLabel.SWITCH) & (types == kind.value)
        out.append(float((turn_pred[sel] == TurnLabel.SWITCH).mean()) if sel.any() else None)
    return out[0], out[1]


@dataclass
class EvalReport:
    n_examples: int
    recall: float
    precision: float
    f1: float
    auc: float | None
    precision_hold: float
    recall_hold: float
    f1_hold: float
    precision_switch: float
    recall_switch: float
    f1_switch: float
    recall_switch_smooth: float | None
    recall_switch_overlapping: float | None
    intent_uar: float | None
    intent_acc: dict[str, float | None]
    per_intent: dict[str, dict]
    turn_confusion: list[list[int]]
    intent_confusion: list[list[int]]
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        """Flat JSON-ready mapping; fractions rounded to 6 decimals."""
        def r(x):
            return None if x is None or (isinstance(x, float) and np.isnan(x)) else round(float(x), 6)

        out = {
            "n_examples": self.n_examples,
            "recall": r(self.recall),
            "precision": r(self.precision),
            "f1": r(self.f1),
            "auc": r(self.auc),
        }
        for name in ("hold", "switch"):
            for m in ("precision", "recall", "f1"):
                out[f"{m}_{name}"] = r(getattr(self, f"{m}_{name}"))
        out["recall_switch_smooth"] = r(self.recall_switch_smooth)
        out["recall_switch_overlapping"] = r(self.recall_switch_overlapping)
        out["intent_uar"] = r(self.intent_uar)
        for c in IntentClass:
            row = self.per_intent.get(c.label, {"absent": True})
            out[f"{c.label}_absent"] = row["absent"]
            out[f"{c.label}_f1_switch"] = r(row.get("f1_switch"))
            out[f"{c.label}_f1_hold"] = r(row.get("f1_hold"))
            out[f"{c.label}_intent_acc"] = r(self.intent_acc.get(c.label))
        out["turn_confusion"] = self.turn_confusion
        out["intent_confusion"] = self.intent_confusion
        out["flags"] = list(self.flags)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def evaluate(turn_probs, intent_probs, turn_true, intent_true, types=None) -> EvalReport:
    """Full report from probability outputs; predictions are the argmax of each head."""
    turn_probs = np.asarray(turn_probs)
    turn_true = np.asarray(turn_true, dtype=int)
    intent_true = np.asarray(intent_true, dtype=int)
    turn_pred = turn_probs.argmax(axis=1)
    intent_pred = None if intent_probs is None else np.asarray(intent_probs).argmax(axis=1)
    flags = []

    turn_cm = confusion_matrix(turn_true, turn_pred, 2)
    prf = prf_per_class(turn_cm)
    for k in prf.excluded:
        flags.append(f"turn class {TurnLabel(k).label} absent from labels and predictions")
    try:
        auc = roc_auc(turn_probs[:, TurnLabel.SWITCH], turn_true == TurnLabel.SWITCH)
    except ValueError:
        auc = None
        flags.append("auc undefined: single turn class")

    if types is None:
        smooth = overlapping = None
    else:
        smooth, overlapping = switch_recall_by_type(turn_pred, turn_true, types)
    if smooth is None:
        flags.append("no smooth switches")
    if overlapping is None:
        flags.append("no overlapping switches")

    intent_cm = np.zeros((len(IntentClass),) * 2, dtype=np.int64)
    intent_acc: dict[str, float | None] = {c.label: None for c in IntentClass}
    intent_uar = None
    if intent_pred is not None:
        intent_cm = confusion_matrix(intent_true, intent_pred, len(IntentClass))
        rec = per_class_recall(intent_cm)
        intent_acc = {c.label: None if np.isnan(rec[c]) else float(rec[c]) for c in IntentClass}
        intent_uar = uar(intent_cm)
        absent = [c.label for c in IntentClass if np.isnan(rec[c])]
        if absent:
            flags.append("intents without support excluded from UAR: " + ", ".join(absent))

    return EvalReport(
        n_examples=int(turn_true.size),
        recall=prf.macro_recall,
        precision=prf.macro_precision,
        f1=prf.macro_f1,
        auc=auc,
        precision_hold=float(prf.precision[0]),
        recall_hold=float(prf.recall[0]),
        f1_hold=float(prf.f1[0]),
        precision_switch=float(prf.precision[1]),
        recall_switch=float(prf.recall[1]),
        f1_switch=float(prf.f1[1]),
        recall_switch_smooth=smooth,
        recall_switch_overlapping=overlapping,
        intent_uar=intent_uar,
        intent_acc=intent_acc,
        per_intent=per_intent_breakdown(turn_pred, turn_true, intent_true, intent_pred),
        turn_confusion=turn_cm.tolist(),
        intent_confusion=intent_cm.tolist(),
        flags=flags,
    )


def random_baseline(turn_true, intent_true=None, types=None, seed: int = 0) -> EvalReport:
    """Uniform random turn (and intent) predictions; AUC from uniform random scores."""
    rng = np.random.default_rng(seed)
    n = len(turn_true)
    turn_pred = rng.integers(0, 2, n)
    scores = rng.random(n)
    # keep argmax equal to the coin flip while the switch column carries the random score
    turn_probs = np.where(turn_pred[:, None] == 1, [[0.0, 1.0]], [[1.0, 0.0]])
    report = evaluate(turn_probs, None, turn_true,
                      np.zeros(n, dtype=int) if intent_true is None else intent_true, types)
    try:
        report.auc = roc_auc(scores, np.asarray(turn_true) == TurnLabel.SWITCH)
    except ValueError:
        report.auc = None
    if intent_true is not None:
        intent_pred = rng.integers(0, len(IntentClass), n)
        cm = confusion_matrix(intent_true, intent_pred, len(IntentClass))
        rec = per_class_recall(cm)
        report.intent_confusion = cm.tolist()
        report.intent_uar = uar(cm)
        report.intent_acc = {c.label: None if np.isnan(rec[c]) else float(rec[c]) for c in IntentClass}
        report.per_intent = per_intent_breakdown(turn_pred, turn_true, intent_true, intent_pred)
    return report


def mean_report(reports: Sequence[dict]) -> dict:
    """Unweighted mean of every numeric field across fold reports (None entries skipped)."""
    keys = [k for k in reports[0] if k not in ("turn_confusion", "intent_confusion", "flags")
            and not k.endswith("_absent")]
    out = {}
    for k in keys:
        vals = [rep[k] for rep in reports if rep.get(k) is not None]
        if k == "n_examples":
            out[k] = int(sum(vals))
        else:
            out[k] = round(float(np.mean(vals)), 6) if vals else None
    out["turn_confusion"] = np.sum([rep["turn_confusion"] for rep in reports], axis=0).tolist()
    out["intent_confusion"] = np.sum([rep["intent_confusion"] for rep in reports], axis=0).tolist()
    out["n_folds"] = len(reports)
    return out


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test over matched per-fold metrics."""
    res = stats.ttest_rel(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    return float(res.statistic), float(res.pvalue)
