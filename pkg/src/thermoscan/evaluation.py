"""Threshold-free and thresholded evaluation metrics plus reporting.

AUROC integrates the ROC curve with trapezoids over the distinct score
thresholds (endpoints included), which makes it exactly the rank
statistic P(score_anom > score_norm) + 0.5 P(tie). Average precision is
the step sum AP = sum_i (R_i - R_{i-1}) P_i with tied scores entering at
one threshold. Both are computed in float64 with exact summation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ThermoscanError, UndefinedMetric
from .manifest import FAULT_CLASSES, LABEL_ANOMALOUS, LABEL_NORMAL

DEFAULT_SECONDS_PER_MODULE = 3.0


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: str
    fault_class: str | None = None
    module_id: int | None = None

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ThermoscanError(f"non-finite score {self.score}")
        if self.label not in (LABEL_NORMAL, LABEL_ANOMALOUS):
            raise ThermoscanError(f"bad label {self.label!r}")

    @property
    def is_anomalous(self) -> bool:
        return self.label == LABEL_ANOMALOUS


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def _rate(self, num: int, den: int) -> float:
        return num / den if den else 0.0

    @property
    def tpr(self) -> float:
        return self._rate(self.tp, self.tp + self.fn)

    @property
    def fpr(self) -> float:
        return self._rate(self.fp, self.fp + self.tn)

    @property
    def tnr(self) -> float:
        return self._rate(self.tn, self.tn + self.fp)

    @property
    def fnr(self) -> float:
        return self._rate(self.fn, self.fn + self.tp)

    @property
    def precision(self) -> float:
        return self._rate(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return self.tpr

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def confusion(samples: Sequence[ScoredSample], delta: float) -> ConfusionMatrix:
    """Tally verdicts (score > delta) against labels."""
    if not samples:
        raise ThermoscanError("no samples to tally")
    tp = fp = tn = fn = 0
    for s in samples:
        predicted_anomalous = s.score > delta
        if s.is_anomalous:
            tp += predicted_anomalous
            fn += not predicted_anomalous
        else:
            fp += predicted_anomalous
            tn += not predicted_anomalous
    return ConfusionMatrix(tp=int(tp), fp=int(fp), tn=int(tn), fn=int(fn))


def _split_counts(samples: Sequence[ScoredSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distinct scores (descending) with per-score positive/negative counts."""
    scores = np.array([s.score for s in samples], dtype=np.float64)
    positive = np.array([s.is_anomalous for s in samples], dtype=bool)
    distinct, inverse = np.unique(scores, return_inverse=True)
    pos = np.bincount(inverse, weights=positive, minlength=distinct.size)
    neg = np.bincount(inverse, weights=~positive, minlength=distinct.size)
    order = np.arange(distinct.size - 1, -1, -1)
    return distinct[order], pos[order], neg[order]


def roc_points(samples: Sequence[ScoredSample]) -> list[tuple[float, float]]:
    """ROC curve (FPR, TPR) points from (0,0) to (1,1), one per threshold."""
    _scores, pos, neg = _split_counts(samples)
    n_pos, n_neg = pos.sum(), neg.sum()
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs at least one positive and one negative")
    tpr = np.concatenate([[0.0], np.cumsum(pos) / n_pos])
    fpr = np.concatenate([[0.0], np.cumsum(neg) / n_neg])
    return list(zip(fpr.tolist(), tpr.tolist()))


def auroc(samples: Sequence[ScoredSample]) -> float:
    """Area under the ROC curve by trapezoidal integration."""
    points = roc_points(samples)
    terms = []
    for (fpr0, tpr0), (fpr1, tpr1) in zip(points, points[1:]):
        terms.append((fpr1 - fpr0) * (tpr1 + tpr0) / 2.0)
    return math.fsum(terms)


def pr_points(samples: Sequence[ScoredSample]) -> list[tuple[float, float]]:
    """Precision-recall curve points, thresholds swept over descending scores."""
    _scores, pos, neg = _split_counts(samples)
    n_pos = pos.sum()
    if n_pos == 0:
        raise UndefinedMetric("average precision needs at least one positive")
    tp = np.cumsum(pos)
    fp = np.cumsum(neg)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    return list(zip(recall.tolist(), precision.tolist()))


def average_precision(samples: Sequence[ScoredSample]) -> float:
    """AP as the recall-weighted sum of precisions at each distinct threshold."""
    points = pr_points(samples)
    terms = []
    prev_recall = 0.0
    for recall, precision in points:
        terms.append((recall - prev_recall) * precision)
        prev_recall = recall
    return math.fsum(terms)


def g_mean(samples: Sequence[ScoredSample], delta: float) -> float:
    """sqrt(TPR * (1 - FPR)) at the given threshold."""
    cm = confusion(samples, delta)
    if cm.tp + cm.fn == 0 or cm.fp + cm.tn == 0:
        raise UndefinedMetric("G-Mean needs both classes present")
    return math.sqrt(cm.tpr * (1.0 - cm.fpr))


def per_fault_errors(
    samples: Sequence[ScoredSample], delta: float
) -> dict[str, float | None]:
    """Percent of each fault class misclassified as normal; None when absent."""
    counts = {name: 0 for name in FAULT_CLASSES}
    missed = {name: 0 for name in FAULT_CLASSES}
    for s in samples:
        if not s.is_anomalous or s.fault_class is None:
            continue
        counts[s.fault_class] += 1
        if not s.score > delta:
            missed[s.fault_class] += 1
    return {
        name: (100.0 * missed[name] / counts[name]) if counts[name] else None
        for name in FAULT_CLASSES
    }


def select_model(log: Sequence[Mapping], criterion: str = "auroc") -> int:
    """Checkpoint id with the best validation metric; ties pick the earliest."""
    if criterion not in ("auroc", "ap"):
        raise ThermoscanError(f"unknown selection criterion {criterion!r}")
    key = f"val_{criterion}"
    best_id = None
    best_value = -math.inf
    for rec in log:
        if key not in rec:
            continue
        if rec[key] > best_value:
            best_value = rec[key]
            best_id = rec["checkpoint"]
    if best_id is None:
        raise ThermoscanError("training log has no validation entries")
    return best_id


@dataclass(frozen=True)
class SavingsReport:
    total_modules: int
    anomalous_modules: int
    tnr: float
    anomaly_recall: float
    seconds_per_module: float
    modules_to_review: int
    lost_anomalies: int
    review_time_s: float
    baseline_time_s: float

    def to_dict(self) -> dict:
        return {
            "total_modules": self.total_modules,
            "anomalous_modules": self.anomalous_modules,
            "tnr": self.tnr,
            "anomaly_recall": self.anomaly_recall,
            "seconds_per_module": self.seconds_per_module,
            "modules_to_review": self.modules_to_review,
            "lost_anomalies": self.lost_anomalies,
            "review_time_s": self.review_time_s,
            "baseline_time_s": self.baseline_time_s,
        }


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def savings_report(
    total_modules: int,
    anomalous_modules: int,
    tnr: float,
    anomaly_recall: float,
    seconds_per_module: float = DEFAULT_SECONDS_PER_MODULE,
) -> SavingsReport:
    """Manual-labelling effort left after filtering modules with the classifier.

    The review queue holds the normal modules that survive the filter plus
    the anomalous modules it finds; anomalies it misses are lost.
    """
    if not 0 <= anomalous_modules <= total_modules:
        raise ThermoscanError("anomalous_modules must lie in [0, total_modules]")
    for name, rate in (("tnr", tnr), ("anomaly_recall", anomaly_recall)):
        if not 0.0 <= rate <= 1.0:
            raise ThermoscanError(f"{name} must lie in [0, 1], got {rate}")
    normals = total_modules - anomalous_modules
    kept_normals = _round_half_up(normals * (1.0 - tnr))
    found = _round_half_up(anomalous_modules * anomaly_recall)
    lost = anomalous_modules - found
    review = kept_normals + found
    return SavingsReport(
        total_modules=total_modules,
        anomalous_modules=anomalous_modules,
        tnr=tnr,
        anomaly_recall=anomaly_recall,
        seconds_per_module=seconds_per_module,
        modules_to_review=review,
        lost_anomalies=lost,
        review_time_s=review * seconds_per_module,
        baseline_time_s=total_modules * seconds_per_module,
    )


@dataclass
class EvaluationReport:
    """Image- and module-level metrics for one prediction run."""

    delta: float
    image_auroc: float
    image_ap: float
    image_g_mean: float
    image_confusion: ConfusionMatrix
    roc_curve: list[tuple[float, float]]
    pr_curve: list[tuple[float, float]]
    per_fault: dict[str, float | None]
    module_confusion: ConfusionMatrix | None = None
    module_auroc: float | None = None
    savings: SavingsReport | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        rec = {
            "delta": self.delta,
            "image": {
                "auroc": self.image_auroc,
                "ap": self.image_ap,
                "g_mean": self.image_g_mean,
                "confusion": self.image_confusion.to_dict(),
            },
            "curves": {
                "roc": [list(p) for p in self.roc_curve],
                "pr": [list(p) for p in self.pr_curve],
            },
            "per_fault_percent_missed": self.per_fault,
        }
        if self.module_confusion is not None:
            rec["module"] = {
                "auroc": self.module_auroc,
                "confusion": self.module_confusion.to_dict(),
            }
        if self.savings is not None:
            rec["savings"] = self.savings.to_dict()
        if self.extra:
            rec["extra"] = self.extra
        return rec

    def render_text(self) -> str:
        lines = [
            f"delta                  {self.delta:.3f}",
            f"image AUROC            {self.image_auroc:.4f}",
            f"image AP               {self.image_ap:.4f}",
            f"image G-Mean           {self.image_g_mean:.4f}",
            "image confusion        TP={tp} FP={fp} TN={tn} FN={fn}".format(
                **self.image_confusion.to_dict()
            ),
        ]
        if self.module_confusion is not None:
            lines.append(f"module AUROC           {self.module_auroc:.4f}")
            lines.append(
                "module confusion       TP={tp} FP={fp} TN={tn} FN={fn}".format(
                    **self.module_confusion.to_dict()
                )
            )
        if self.savings is not None:
            s = self.savings
            lines.append(
                f"review queue           {s.modules_to_review} of {s.total_modules} modules, "
                f"{s.lost_anomalies} anomalies lost"
            )
            lines.append(
                f"review time            {s.review_time_s / 60:.1f} min "
                f"(baseline {s.baseline_time_s / 3600:.1f} h)"
            )
        lines.append("missed anomalies by fault class (%):")
        cells = [
            f"  {name:>4}: " + ("--" if value is None else f"{value:.1f}")
            for name, value in self.per_fault.items()
        ]
        lines.extend(cells)
        return "\n".join(lines) + "\n"


def evaluate_scored_samples(
    image_samples: Sequence[ScoredSample],
    delta: float,
    module_samples: Sequence[ScoredSample] | None = None,
    module_verdict_counts: tuple[int, int, int, int] | None = None,
    seconds_per_module: float = DEFAULT_SECONDS_PER_MODULE,
) -> EvaluationReport:
    """Assemble the full report from labelled image (and module) scores."""
    cm = confusion(image_samples, delta)
    report = EvaluationReport(
        delta=delta,
        image_auroc=auroc(image_samples),
        image_ap=average_precision(image_samples),
        image_g_mean=g_mean(image_samples, delta),
        image_confusion=cm,
        roc_curve=roc_points(image_samples),
        pr_curve=pr_points(image_samples),
        per_fault=per_fault_errors(image_samples, delta),
    )
    if module_samples:
        if module_verdict_counts is None:
            raise ThermoscanError("module confusion counts required with module samples")
        tp, fp, tn, fn = module_verdict_counts
        mcm = ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)
        report.module_confusion = mcm
        report.module_auroc = auroc(module_samples)
        report.savings = savings_report(
            total_modules=len(module_samples),
            anomalous_modules=tp + fn,
            tnr=mcm.tnr,
            anomaly_recall=mcm.tpr,
            seconds_per_module=seconds_per_module,
        )
    return report
