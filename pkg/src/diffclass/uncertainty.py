"""Vote-entropy uncertainty and coverage/accuracy filtering curves."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classifier import ClassificationResult

OUTCOMES = ("TP", "TN", "FP", "FN")


@dataclass
class UncertaintyEstimate:
    vote_fraction: np.ndarray  # (..., C)
    entropy: np.ndarray  # (...) bits
    predicted: np.ndarray


@dataclass
class CoverageCurve:
    retained_fraction: np.ndarray
    thresholds: np.ndarray
    n_kept: np.ndarray
    accuracy: np.ndarray

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.retained_fraction.tolist(), self.accuracy.tolist()))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["retained_fraction", "threshold", "n_kept", "accuracy"])
            for row in zip(self.retained_fraction, self.thresholds, self.n_kept, self.accuracy):
                w.writerow([f"{row[0]:.6g}", f"{row[1]:.10g}", int(row[2]), f"{row[3]:.10g}"])


def entropy_bits(p: np.ndarray) -> np.ndarray:
    """Shannon entropy over the last axis in bits, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(p), 0.0)
    return terms.sum(axis=-1)


def estimate_uncertainty(votes, N: int | None = None) -> UncertaintyEstimate:
    """Vote fractions and their entropy. ``votes`` is (C,) or (B, C)."""
    votes = np.asarray(votes)
    if N is None:
        N = votes.sum(axis=-1)
    N_arr = np.asarray(N)
    if np.any(N_arr <= 0):
        raise ValueError("N must be positive")
    if np.any(votes.sum(axis=-1) != N_arr):
        raise ValueError("votes must sum to N")
    frac = votes / np.expand_dims(N_arr, -1)
    return UncertaintyEstimate(frac, entropy_bits(frac), votes.argmax(axis=-1))


def _entropies(results) -> np.ndarray:
    if isinstance(results, ClassificationResult):
        return estimate_uncertainty(results.votes).entropy
    return np.asarray(results, dtype=np.float64)


def coverage_accuracy_curve(results: ClassificationResult, labels,
                            fractions=(1.0, 0.9, 0.8, 0.7, 0.6, 0.55, 0.5, 0.4, 0.3, 0.2, 0.1),
                            entropies=None) -> CoverageCurve:
    """Accuracy on the most certain ``f`` of samples, for each retained fraction f.

    Samples are ranked by vote entropy, ascending; ties keep the lower sample
    index first. Points come out ordered by decreasing retained fraction.
    """
    labels = np.asarray(labels)
    predicted = np.asarray(results.predicted)
    if len(labels) != len(predicted):
        raise ValueError("results and labels are not aligned")
    ent = _entropies(results) if entropies is None else np.asarray(entropies, dtype=np.float64)
    order = np.lexsort((np.arange(len(ent)), ent))
    correct = (predicted == labels)[order]
    fr = np.array(sorted(set(float(f) for f in fractions), reverse=True))
    if np.any((fr <= 0) | (fr > 1)):
        raise ValueError("retained fractions must lie in (0, 1]")
    kept, acc, thr = [], [], []
    for f in fr:
        n = int(np.floor(f * len(order) + 0.5))
        if n == 0:
            raise ValueError(f"retained fraction {f} keeps no samples out of {len(order)}")
        kept.append(n)
        acc.append(correct[:n].mean())
        thr.append(ent[order[n - 1]])
    return CoverageCurve(fr, np.array(thr), np.array(kept), np.array(acc))


def outcome_labels(predicted, labels, positive: int = 1) -> np.ndarray:
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    out = np.empty(len(labels), dtype=object)
    pos_pred, pos_true = predicted == positive, labels == positive
    out[pos_pred & pos_true] = "TP"
    out[~pos_pred & ~pos_true] = "TN"
    out[pos_pred & ~pos_true] = "FP"
    out[~pos_pred & pos_true] = "FN"
    return out


def confidence_by_outcome(results: ClassificationResult, labels,
                          positive: int = 1) -> dict[str, dict | None]:
    """Entropy five-number summaries (plus mean and count) per TP/TN/FP/FN group.

    Empty groups map to ``None``.
    """
    labels = np.asarray(labels)
    if np.unique(labels).size > 2 or np.asarray(results.votes).shape[1] != 2:
        raise ValueError("outcome grouping needs binary labels")
    ent = _entropies(results)
    groups = outcome_labels(results.predicted, labels, positive)
    summary: dict[str, dict | None] = {}
    for name in OUTCOMES:
        vals = ent[groups == name]
        if vals.size == 0:
            summary[name] = None
            continue
        q = np.quantile(vals, [0.0, 0.25, 0.5, 0.75, 1.0])
        summary[name] = {"min": q[0], "q1": q[1], "median": q[2], "q3": q[3], "max": q[4],
                         "mean": float(vals.mean()), "count": int(vals.size)}
    return summary


def write_outcome_csv(summary: dict[str, dict | None], path) -> None:
    with open(Path(path), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["outcome", "count", "min", "q1", "median", "q3", "max"])
        for name in OUTCOMES:
            s = summary.get(name)
            if s is None:
                continue
            w.writerow([name, s["count"]] + [f"{s[k]:.10g}" for k in ("min", "q1", "median", "q3", "max")])
