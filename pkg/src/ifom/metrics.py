"""PAD metrics: ROC, EER, AUC, TDR at a fixed FDR, and ACE.

Attacks are the positive class and a sample is flagged as an attack when its
score is >= the threshold.  A false detection is a bona fide sample flagged
as an attack.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import InsufficientDataError, InvalidInputError


@dataclass(frozen=True)
class ScoreSet:
    attack_scores: np.ndarray
    bonafide_scores: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.attack_scores, dtype=np.float64).reshape(-1)
        b = np.asarray(self.bonafide_scores, dtype=np.float64).reshape(-1)
        if a.size == 0 or b.size == 0:
            raise InsufficientDataError("both attack and bona fide scores are required")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise InvalidInputError("scores must be finite")
        object.__setattr__(self, "attack_scores", a)
        object.__setattr__(self, "bonafide_scores", b)

    @classmethod
    def from_labels(cls, scores: Sequence[float], is_attack: Sequence[bool]) -> "ScoreSet":
        scores = np.asarray(scores, dtype=np.float64)
        mask = np.asarray(is_attack, dtype=bool)
        return cls(scores[mask], scores[~mask])


@dataclass(frozen=True)
class RocCurve:
    """Operating points ordered by decreasing threshold; the first has threshold +inf."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray

    def points(self) -> List[Tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


def _as_scoreset(scores) -> ScoreSet:
    if isinstance(scores, ScoreSet):
        return scores
    attack, bonafide = scores
    return ScoreSet(attack, bonafide)


def roc(scores: ScoreSet) -> RocCurve:
    """Exact step ROC with one point per distinct score, plus the (0, 0) start."""
    s = _as_scoreset(scores)
    thr = np.unique(np.concatenate([s.attack_scores, s.bonafide_scores]))[::-1]
    # count of scores >= t, via sorted search on ascending arrays
    a_sorted = np.sort(s.attack_scores)
    b_sorted = np.sort(s.bonafide_scores)
    tp = a_sorted.size - np.searchsorted(a_sorted, thr, side="left")
    fp = b_sorted.size - np.searchsorted(b_sorted, thr, side="left")
    thresholds = np.concatenate([[np.inf], thr])
    tpr = np.concatenate([[0.0], tp / a_sorted.size])
    fpr = np.concatenate([[0.0], fp / b_sorted.size])
    return RocCurve(thresholds, fpr, tpr)


def auc(scores: ScoreSet) -> float:
    """Area under the ROC; ties contribute half, so this equals the Mann-Whitney statistic."""
    curve = roc(scores)
    return float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


def eer(scores: ScoreSet) -> float:
    """Equal error rate.

    Among ROC operating points minimizing |FPR - FNR|, returns the smallest
    (FPR + FNR) / 2.
    """
    curve = roc(scores)
    fnr = 1.0 - curve.tpr
    gap = np.abs(curve.fpr - fnr)
    mean_err = (curve.fpr + fnr) / 2.0
    # rates are ratios of counts; equal gaps can differ by rounding only
    best = gap <= gap.min() + 1e-12
    return float(mean_err[best].min())


def tdr_at_fdr(scores: ScoreSet, fdr_cap: float = 0.01) -> float:
    """Highest attack detection rate over thresholds whose bona fide false detection rate is <= fdr_cap."""
    if not 0.0 < fdr_cap < 1.0:
        raise InvalidInputError("fdr_cap must be in (0, 1)")
    curve = roc(scores)
    ok = curve.fpr <= fdr_cap
    return float(curve.tpr[ok].max())


def ace(scores: ScoreSet, threshold: float = 0.5) -> float:
    """Average classification error (FNR + FPR) / 2 at a fixed threshold."""
    s = _as_scoreset(scores)
    fnr = np.mean(s.attack_scores < threshold)
    fpr = np.mean(s.bonafide_scores >= threshold)
    return float((fnr + fpr) / 2.0)


def report(scores: ScoreSet, fdr_cap: float = 0.01, threshold: float = 0.5) -> Dict[str, float]:
    s = _as_scoreset(scores)
    return {
        "eer": eer(s),
        "auc": auc(s),
        "tdr_at_fdr": tdr_at_fdr(s, fdr_cap),
        "fdr_cap": float(fdr_cap),
        "ace": ace(s, threshold),
        "ace_threshold": float(threshold),
        "n_attack": int(s.attack_scores.size),
        "n_bonafide": int(s.bonafide_scores.size),
    }


# --- file formats ------------------------------------------------------------

SCORE_FIELDS = ("sample_id", "label", "score")


def write_score_file(path, rows: Iterable[Tuple[str, str, float]]) -> None:
    """CSV with header sample_id,label,score; scores written with repr() precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_FIELDS)
        for sid, label, value in rows:
            if label not in ("bona_fide", "attack"):
                raise InvalidInputError(f"score file rows need a bona_fide/attack label, got {label!r}")
            w.writerow([sid, label, repr(float(value))])


def read_score_file(path) -> Tuple[List[str], List[str], np.ndarray]:
    ids, labels, values = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SCORE_FIELDS:
            raise InvalidInputError(f"{path}: expected header {','.join(SCORE_FIELDS)}")
        for row in reader:
            ids.append(row["sample_id"])
            labels.append(row["label"])
            values.append(float(row["score"]))
    return ids, labels, np.asarray(values, dtype=np.float64)


def scoreset_from_file(path) -> ScoreSet:
    _, labels, values = read_score_file(path)
    return ScoreSet.from_labels(values, [lab == "attack" for lab in labels])


def write_report(path, rep: Dict[str, float]) -> None:
    with open(path, "w") as fh:
        json.dump(rep, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_roc(path, curve: RocCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr"])
        for f, t in zip(curve.fpr, curve.tpr):
            w.writerow([repr(float(f)), repr(float(t))])


def read_roc(path) -> Tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1]
