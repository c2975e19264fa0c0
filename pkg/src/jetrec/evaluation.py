"""ROC curves, exact AUC and background rejection at a working point."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SingleClass, UnreachableEfficiency

# rejection when no background passes the working-point threshold
NO_BACKGROUND = math.inf


@dataclass(frozen=True)
class RocCurve:
    """Step ROC. A sample is accepted when ``score >= threshold``.

    ``thresholds[0]`` is ``+inf`` so that the curve starts at (0, 0); the last
    threshold is the smallest score, where both rates are 1.
    """

    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float


def _split(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D of equal length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    pos, neg = s[y == 1], s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise SingleClass("ROC needs both signal and background samples")
    return pos, neg


def auc_mann_whitney(scores, labels) -> float:
    """P(score_sig > score_bkg) + 0.5 P(tie), by sorted pair counting."""
    pos, neg = _split(scores, labels)
    neg = np.sort(neg)
    below = np.searchsorted(neg, pos, side="left")
    below_or_tied = np.searchsorted(neg, pos, side="right")
    twice_u = int(below.sum()) + int(below_or_tied.sum())
    return twice_u / (2.0 * len(pos) * len(neg))


def roc(scores, labels) -> RocCurve:
    pos, neg = _split(scores, labels)
    thr = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    n_pos_pass = len(pos) - np.searchsorted(pos_sorted, thr, side="left")
    n_neg_pass = len(neg) - np.searchsorted(neg_sorted, thr, side="left")
    thresholds = np.concatenate([[np.inf], thr])
    tpr = np.concatenate([[0.0], n_pos_pass / len(pos)])
    fpr = np.concatenate([[0.0], n_neg_pass / len(neg)])
    return RocCurve(thresholds, tpr, fpr, auc_mann_whitney(scores, labels))


def trapezoid_auc(curve: RocCurve) -> float:
    return float(np.trapezoid(curve.tpr, curve.fpr))


def rejection_at(curve: RocCurve, target_eff: float = 0.5) -> float:
    """1/fpr at the largest threshold whose signal efficiency reaches ``target_eff``."""
    hits = np.nonzero(curve.tpr >= target_eff)[0]
    if len(hits) == 0:
        raise UnreachableEfficiency(f"signal efficiency never reaches {target_eff}")
    fpr = curve.fpr[hits[0]]
    return NO_BACKGROUND if fpr == 0 else float(1.0 / fpr)


def working_point(curve: RocCurve, target_eff: float = 0.5) -> tuple[float, float, float]:
    """(threshold, tpr, fpr) of the working point used by ``rejection_at``."""
    hits = np.nonzero(curve.tpr >= target_eff)[0]
    if len(hits) == 0:
        raise UnreachableEfficiency(f"signal efficiency never reaches {target_eff}")
    i = hits[0]
    return float(curve.thresholds[i]), float(curve.tpr[i]), float(curve.fpr[i])


def export_roc_csv(curve: RocCurve, path) -> None:
    if len(curve.thresholds) == 0:
        raise ValueError("empty ROC curve")
    if np.any(np.diff(curve.tpr) < 0) or np.any(np.diff(curve.fpr) < 0):
        raise ValueError("ROC rates are not monotone")
    if np.any(np.diff(curve.thresholds) >= 0):
        raise ValueError("ROC thresholds are not strictly descending")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("threshold,tpr,fpr\n")
        for t, a, b in zip(curve.thresholds.tolist(), curve.tpr.tolist(), curve.fpr.tolist()):
            fh.write(f"{t!r},{a!r},{b!r}\n")
        fh.write(f"# auc,{curve.auc!r}\n")


def read_roc_csv(path) -> RocCurve:
    rows, auc = [], None
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "threshold,tpr,fpr":
            raise ValueError(f"unexpected ROC header {header!r}")
        for line in fh:
            line = line.strip()
            if line.startswith("# auc,"):
                auc = float(line.split(",", 1)[1])
            elif line:
                rows.append([float(x) for x in line.split(",")])
    if auc is None:
        raise ValueError("ROC file has no auc trailer")
    arr = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return RocCurve(arr[:, 0], arr[:, 1], arr[:, 2], auc)
