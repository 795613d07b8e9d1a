"""CTR metrics, relative improvement, multi-seed aggregation and paired t-tests."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

LOGLOSS_EPS = 1e-7


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-based ROC AUC; tied scores get average ranks (a tie counts 1/2)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    ranks = stats.rankdata(s, method="average")
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(scores: Sequence[float], labels: Sequence[int]) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.size == 0:
        raise ValueError("logloss of an empty input")
    s = np.clip(s, LOGLOSS_EPS, 1.0 - LOGLOSS_EPS)
    return float(-np.mean(y * np.log(s) + (1.0 - y) * np.log1p(-s)))


def rela_impr_auc(target_auc: float, baseline_auc: float) -> float:
    """Relative AUC improvement above the 0.5 random floor, in percent."""
    if baseline_auc <= 0.5:
        raise ValueError(f"baseline AUC must exceed 0.5, got {baseline_auc}")
    return ((target_auc - 0.5) / (baseline_auc - 0.5) - 1.0) * 100.0


def rela_impr_logloss(target_ll: float, baseline_ll: float) -> float:
    """Relative LogLoss improvement (baseline / target - 1), in percent."""
    if target_ll <= 0:
        raise ValueError(f"target logloss must be positive, got {target_ll}")
    return (baseline_ll / target_ll - 1.0) * 100.0


@dataclass
class MetricSummary:
    values: list[float]
    mean: float
    std: float | None  # None when only one run is available

    def as_dict(self) -> dict:
        return {"values": self.values, "mean": self.mean, "std": self.std}


@dataclass
class MetricsReport:
    auc: MetricSummary
    logloss: MetricSummary
    rela_impr: dict[str, dict[str, float]] = field(default_factory=dict)
    significance: dict[str, dict] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "auc": self.auc.as_dict(),
            "logloss": self.logloss.as_dict(),
            "rela_impr": self.rela_impr,
            "significance": self.significance,
        }


def summarize(values: Sequence[float]) -> MetricSummary:
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("cannot aggregate an empty list of runs")
    std = float(np.std(vals, ddof=1)) if len(vals) >= 2 else None
    return MetricSummary(vals, float(np.mean(vals)), std)


def aggregate_runs(per_seed_metrics: Sequence[Mapping[str, float]]) -> MetricsReport:
    """Mean and sample standard deviation of per-seed ``{"auc", "logloss"}`` records."""
    if not per_seed_metrics:
        raise ValueError("cannot aggregate an empty list of runs")
    return MetricsReport(
        auc=summarize([m["auc"] for m in per_seed_metrics]),
        logloss=summarize([m["logloss"] for m in per_seed_metrics]),
    )


def paired_t_test(ours: Sequence[float], baseline: Sequence[float],
                  level: float = 0.05) -> tuple[float, bool]:
    """Two-sided paired t-test on per-seed differences (n - 1 degrees of freedom)."""
    a = np.asarray(ours, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, False
        return math.copysign(math.inf, mean), True
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return float(t), bool(p < level)
