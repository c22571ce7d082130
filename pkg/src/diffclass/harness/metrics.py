"""Accuracy / F1 summaries over inference seeds."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import accuracy_score, f1_score


@dataclass
class MetricsReport:
    rule: str
    N: int
    seeds: list[int] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    f1: list[float] = field(default_factory=list)  # binary F1, positive class 1
    macro_f1: list[float] = field(default_factory=list)

    def add(self, seed: int, predicted, labels, positive: int = 1) -> None:
        predicted, labels = np.asarray(predicted), np.asarray(labels)
        classes = sorted(set(labels.tolist()) | set(predicted.tolist()))
        self.seeds.append(int(seed))
        self.accuracy.append(float(accuracy_score(labels, predicted)))
        self.f1.append(float(f1_score(labels == positive, predicted == positive, zero_division=0)))
        self.macro_f1.append(float(f1_score(labels, predicted, labels=classes, average="macro",
                                            zero_division=0)))

    @staticmethod
    def mean_std(values: list[float]) -> tuple[float, float | None]:
        """Mean and sample std; std is omitted (None) below two seeds."""
        mean = float(np.mean(values))
        return mean, (statistics.stdev(values) if len(values) >= 2 else None)

    def summary(self) -> dict:
        out = {"rule": self.rule, "N": self.N, "seeds": self.seeds}
        for name in ("accuracy", "f1", "macro_f1"):
            mean, std = self.mean_std(getattr(self, name))
            out[name] = {"per_seed": getattr(self, name), "mean": mean, "std": std}
        return out


def format_mean_std(mean: float, std: float | None, scale: float = 100.0) -> str:
    if std is None:
        return f"{scale * mean:.1f}"
    return f"{scale * mean:.1f} ± {scale * std:.1f}"
