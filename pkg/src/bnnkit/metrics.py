"""Calibration and separability metrics for predictive distributions.

ECE/MCE use equal-width confidence bins with edge ties going to the lower
bin (confidence 1.0 lands in the last bin). AUROC is the Mann-Whitney rank
statistic with average ranks for ties; AUPR is precision-recall step
summation over distinct thresholds in descending score order. Histograms
normalize each prediction type (correct / misclassified / ood) by that
type's own count.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .predictive import Prediction

MEASURES = ("confidence", "entropy", "mutual-information")


@dataclass(frozen=True)
class MetricsConfig:
    bin_count: int = 15
    uncertainty_measure: str = "confidence"
    include_ood: bool | None = None  # None = use ood metrics iff ood predictions given

    def __post_init__(self):
        if self.bin_count < 2:
            raise ValueError(f"need at least 2 bins, got {self.bin_count}")
        if self.uncertainty_measure not in MEASURES:
            raise ValueError(f"unknown uncertainty measure {self.uncertainty_measure!r}")


@dataclass
class MetricsReport:
    accuracy: float
    ece: float
    mce: float
    nll: float
    brier: float
    ece_with_ood: float | None = None
    mce_with_ood: float | None = None
    auroc_misclassification: float | None = None
    aupr_misclassification: float | None = None
    auroc_ood: float | None = None
    aupr_ood: float | None = None
    histogram: dict = field(default_factory=dict)  # type -> list of relative frequencies
    histogram_edges: list = field(default_factory=list)
    uncertainty_measure: str = "confidence"
    reasons: dict = field(default_factory=dict)  # absent-metric name -> reason
    zero_probability_items: list = field(default_factory=list)


def bin_index(values, bin_count: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """Equal-width bin index with edge values assigned to the lower bin."""
    values = np.asarray(values, dtype=np.float64)
    inner = np.linspace(low, high, bin_count + 1)[1:-1]
    return np.clip(np.searchsorted(inner, values, side="left"), 0, bin_count - 1)


def ece_mce(mean_probs, labels, bin_count: int = 15):
    """Expected/maximum gap between per-bin accuracy and confidence."""
    probs = np.atleast_2d(np.asarray(mean_probs, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[0] == 0:
        raise ValueError("ece_mce needs at least one prediction")
    conf = probs.max(axis=1)
    correct = np.argmax(probs, axis=1) == labels
    return _ece_mce_from_conf(conf, correct, bin_count)


def _ece_mce_from_conf(conf, correct, bin_count):
    conf = np.asarray(conf, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    idx = bin_index(conf, bin_count)
    n = conf.size
    ece = 0.0
    mce = 0.0
    for b in range(bin_count):
        mask = idx == b
        size = int(mask.sum())
        if size == 0:
            continue
        gap = abs(correct[mask].mean() - conf[mask].mean())
        ece += (size / n) * gap
        mce = max(mce, gap)
    return float(ece), float(mce)


def nll_brier(mean_probs, labels):
    """Mean NLL of the true class and mean multi-class Brier score.

    Items with zero probability at the true label make the NLL +inf; their
    indices come back as the third element instead of raising.
    """
    probs = np.atleast_2d(np.asarray(mean_probs, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[0] == 0:
        raise ValueError("nll_brier needs at least one prediction")
    p_true = probs[np.arange(len(labels)), labels]
    flagged = np.flatnonzero(p_true == 0.0).tolist()
    if flagged:
        nll = math.inf
    else:
        nll = float(-np.mean(np.log(p_true)))
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1.0
    brier = float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))
    return nll, brier, flagged


def auroc_aupr(positive_scores, negative_scores):
    """Separability of two score populations; larger scores = more positive."""
    pos = np.asarray(positive_scores, dtype=np.float64)
    neg = np.asarray(negative_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auroc_aupr needs non-empty score lists on both sides")
    ranks = rankdata(np.concatenate([pos, neg]))
    auroc = (ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2) / (pos.size * neg.size)

    # average precision: step summation over distinct thresholds, descending
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.size, bool), np.zeros(neg.size, bool)])
    order = np.argsort(-scores, kind="stable")
    scores, is_pos = scores[order], is_pos[order]
    aupr = 0.0
    prev_recall = 0.0
    tp = fp = 0
    i = 0
    while i < scores.size:
        j = i
        while j < scores.size and scores[j] == scores[i]:
            tp += bool(is_pos[j])
            fp += not is_pos[j]
            j += 1
        recall = tp / pos.size
        precision = tp / (tp + fp)
        aupr += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return float(auroc), float(aupr)


def oriented_score(pred: Prediction, measure: str) -> float:
    """Uncertainty measure oriented so larger = more likely correct/in-distribution."""
    if measure == "confidence":
        return pred.confidence
    if measure == "entropy":
        return -pred.entropy
    if measure == "mutual-information":
        return -pred.mutual_information
    raise ValueError(f"unknown uncertainty measure {measure!r}")


def _measure_value_and_range(pred: Prediction, measure: str, class_count: int):
    top = math.log(class_count)
    if measure == "confidence":
        return pred.confidence, (0.0, 1.0)
    if measure == "entropy":
        return pred.entropy, (0.0, top)
    return pred.mutual_information, (0.0, top)


def evaluate(
    test_preds: list[Prediction],
    ood_preds: list[Prediction] | None = None,
    cfg: MetricsConfig = MetricsConfig(),
) -> MetricsReport:
    """Full metrics report over labeled test predictions and optional
    unlabeled out-of-distribution predictions (always counted incorrect)."""
    if not test_preds:
        raise ValueError("evaluate needs at least one test prediction")
    if any(p.label is None for p in test_preds):
        raise ValueError("test predictions must carry true labels")
    if cfg.include_ood and not ood_preds:
        raise ValueError("config requests OOD metrics but no OOD predictions were given")
    if ood_preds and any(p.label is not None for p in ood_preds):
        raise ValueError("OOD predictions must not carry labels")

    probs = np.stack([p.mean_probs for p in test_preds])
    labels = np.asarray([p.label for p in test_preds], dtype=np.int64)
    conf = np.asarray([p.confidence for p in test_preds])
    correct = np.argmax(probs, axis=1) == labels

    ece, mce = _ece_mce_from_conf(conf, correct, cfg.bin_count)
    nll, brier, flagged = nll_brier(probs, labels)
    report = MetricsReport(
        accuracy=float(correct.mean()),
        ece=ece,
        mce=mce,
        nll=nll,
        brier=brier,
        uncertainty_measure=cfg.uncertainty_measure,
        zero_probability_items=flagged,
    )

    scores = np.asarray([oriented_score(p, cfg.uncertainty_measure) for p in test_preds])
    if correct.all():
        report.reasons["auroc_misclassification"] = "no misclassified predictions"
    elif not correct.any():
        report.reasons["auroc_misclassification"] = "no correct predictions"
    else:
        auroc, aupr = auroc_aupr(scores[correct], scores[~correct])
        report.auroc_misclassification = auroc
        report.aupr_misclassification = aupr

    use_ood = bool(ood_preds) if cfg.include_ood is None else cfg.include_ood
    if use_ood:
        ood_scores = np.asarray([oriented_score(p, cfg.uncertainty_measure) for p in ood_preds])
        report.auroc_ood, report.aupr_ood = auroc_aupr(scores, ood_scores)
        ood_conf = np.asarray([p.confidence for p in ood_preds])
        all_conf = np.concatenate([conf, ood_conf])
        all_correct = np.concatenate([correct, np.zeros(len(ood_preds), bool)])
        report.ece_with_ood, report.mce_with_ood = _ece_mce_from_conf(
            all_conf, all_correct, cfg.bin_count
        )

    class_count = probs.shape[1]
    _, (low, high) = _measure_value_and_range(test_preds[0], cfg.uncertainty_measure, class_count)
    edges = np.linspace(low, high, cfg.bin_count + 1)
    report.histogram_edges = edges.tolist()
    groups = {
        "correct": [p for p, ok in zip(test_preds, correct) if ok],
        "misclassified": [p for p, ok in zip(test_preds, correct) if not ok],
        "ood": list(ood_preds) if use_ood else [],
    }
    for name, preds in groups.items():
        counts = np.zeros(cfg.bin_count)
        if preds:
            vals = [
                _measure_value_and_range(p, cfg.uncertainty_measure, class_count)[0] for p in preds
            ]
            idx = bin_index(vals, cfg.bin_count, low, high)
            np.add.at(counts, idx, 1.0)
            counts /= len(preds)
        report.histogram[name] = counts.tolist()
    return report


def sweep_measures(
    test_preds: list[Prediction],
    ood_preds: list[Prediction] | None = None,
    cfg: MetricsConfig = MetricsConfig(),
    target: str = "auroc_misclassification",
):
    """Evaluate under every uncertainty measure and return the one whose
    `target` metric is largest, with its report."""
    best = None
    for measure in MEASURES:
        mcfg = MetricsConfig(cfg.bin_count, measure, cfg.include_ood)
        report = evaluate(test_preds, ood_preds, mcfg)
        value = getattr(report, target)
        if value is not None and (best is None or value > best[1]):
            best = (measure, value, report)
    if best is None:
        raise ValueError(f"no measure produced a defined {target}")
    return best[0], best[2]


# ---------------------------------------------------------------------------
# report files


def report_to_dict(report: MetricsReport) -> dict:
    return {
        "accuracy": report.accuracy,
        "ece": report.ece,
        "mce": report.mce,
        "nll": report.nll if math.isfinite(report.nll) else "inf",
        "brier": report.brier,
        "ece_with_ood": report.ece_with_ood,
        "mce_with_ood": report.mce_with_ood,
        "auroc_misclassification": report.auroc_misclassification,
        "aupr_misclassification": report.aupr_misclassification,
        "auroc_ood": report.auroc_ood,
        "aupr_ood": report.aupr_ood,
        "histogram": report.histogram,
        "histogram_edges": report.histogram_edges,
        "uncertainty_measure": report.uncertainty_measure,
        "reasons": report.reasons,
        "zero_probability_items": report.zero_probability_items,
    }


def save_report(report: MetricsReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report), fh, sort_keys=True, indent=1)
        fh.write("\n")


def save_histogram_csv(report: MetricsReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    edges = report.histogram_edges
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "correct", "misclassified", "ood"])
        for b in range(len(edges) - 1):
            writer.writerow(
                [
                    repr(edges[b]),
                    repr(edges[b + 1]),
                    repr(report.histogram["correct"][b]),
                    repr(report.histogram["misclassified"][b]),
                    repr(report.histogram["ood"][b]),
                ]
            )
