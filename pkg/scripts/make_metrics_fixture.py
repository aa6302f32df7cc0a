#!/usr/bin/env python3
"""Regenerate tests/fixtures/metrics_fixture.json.

Twenty predictions (14 labeled test + 6 unlabeled OOD) with every expected
metric computed here from first definitions using exact rational arithmetic
(fractions for everything except the final float conversion; logs for NLL
only at the end). This script deliberately imports nothing from bnnkit so
the frozen numbers are an independent oracle of the library's metrics path.

Run from the repo root:  python3 scripts/make_metrics_fixture.py
"""

import json
import math
from fractions import Fraction
from pathlib import Path

BINS = 10

# (mean_probs, label); label None = out-of-distribution
TEST_ITEMS = [
    ((Fraction(9, 10), Fraction(1, 20), Fraction(1, 20)), 0),
    ((Fraction(8, 10), Fraction(1, 10), Fraction(1, 10)), 0),
    ((Fraction(75, 100), Fraction(20, 100), Fraction(5, 100)), 1),
    ((Fraction(7, 10), Fraction(2, 10), Fraction(1, 10)), 0),
    ((Fraction(7, 10), Fraction(15, 100), Fraction(15, 100)), 2),
    ((Fraction(65, 100), Fraction(25, 100), Fraction(10, 100)), 0),
    ((Fraction(6, 10), Fraction(3, 10), Fraction(1, 10)), 1),
    ((Fraction(55, 100), Fraction(35, 100), Fraction(10, 100)), 0),
    ((Fraction(5, 10), Fraction(3, 10), Fraction(2, 10)), 0),
    ((Fraction(45, 100), Fraction(45, 100), Fraction(10, 100)), 1),  # argmax tie -> class 0
    ((Fraction(4, 10), Fraction(35, 100), Fraction(25, 100)), 0),
    ((Fraction(35, 100), Fraction(35, 100), Fraction(30, 100)), 0),  # argmax tie -> class 0
    ((Fraction(1), Fraction(0), Fraction(0)), 0),  # confidence exactly 1.0
    ((Fraction(34, 100), Fraction(33, 100), Fraction(33, 100)), 2),
]
OOD_ITEMS = [
    (Fraction(95, 100), Fraction(3, 100), Fraction(2, 100)),
    (Fraction(7, 10), Fraction(2, 10), Fraction(1, 10)),  # ties a test confidence
    (Fraction(5, 10), Fraction(25, 100), Fraction(25, 100)),
    (Fraction(45, 100), Fraction(30, 100), Fraction(25, 100)),
    (Fraction(4, 10), Fraction(3, 10), Fraction(3, 10)),
    (Fraction(34, 100), Fraction(33, 100), Fraction(33, 100)),
]


def argmax(probs):
    best = 0
    for i, p in enumerate(probs):
        if p > probs[best]:
            best = i
    return best


def bin_of(conf, bins=BINS):
    # equal-width bins over [0, 1]; edges belong to the lower bin; 1.0 -> last
    for b in range(1, bins + 1):
        if conf <= Fraction(b, bins):
            return b - 1
    return bins - 1


def ece_mce(pairs, bins=BINS):
    n = len(pairs)
    per_bin = {}
    for conf, correct in pairs:
        per_bin.setdefault(bin_of(conf, bins), []).append((conf, correct))
    ece = Fraction(0)
    mce = Fraction(0)
    for members in per_bin.values():
        size = len(members)
        acc = Fraction(sum(1 for _, ok in members if ok), size)
        conf = sum(c for c, _ in members) / size
        gap = abs(acc - conf)
        ece += Fraction(size, n) * gap
        mce = max(mce, gap)
    return ece, mce


def auroc(pos, neg):
    wins = Fraction(0)
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1
            elif p == q:
                wins += Fraction(1, 2)
    return wins / (len(pos) * len(neg))


def aupr(pos, neg):
    thresholds = sorted(set(pos) | set(neg), reverse=True)
    area = Fraction(0)
    prev_recall = Fraction(0)
    for t in thresholds:
        tp = sum(1 for p in pos if p >= t)
        fp = sum(1 for q in neg if q >= t)
        recall = Fraction(tp, len(pos))
        precision = Fraction(tp, tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def entropy(probs):
    return float(-sum(float(p) * math.log(float(p)) for p in probs if p > 0))


def main():
    correct = [argmax(m) == y for m, y in TEST_ITEMS]
    conf = [max(m) for m, _ in TEST_ITEMS]
    ood_conf = [max(m) for m in OOD_ITEMS]

    accuracy = Fraction(sum(correct), len(TEST_ITEMS))
    ece, mce = ece_mce(list(zip(conf, correct)))
    ece_ood, mce_ood = ece_mce(
        list(zip(conf, correct)) + [(c, False) for c in ood_conf]
    )

    nll = -sum(math.log(float(m[y])) for m, y in TEST_ITEMS) / len(TEST_ITEMS)
    brier = sum(
        sum((m[c] - (1 if c == y else 0)) ** 2 for c in range(3)) for m, y in TEST_ITEMS
    ) / len(TEST_ITEMS)

    pos = [c for c, ok in zip(conf, correct) if ok]
    neg = [c for c, ok in zip(conf, correct) if not ok]
    auroc_miss, aupr_miss = auroc(pos, neg), aupr(pos, neg)
    auroc_ood, aupr_ood = auroc(conf, ood_conf), aupr(conf, ood_conf)

    def hist(values, total):
        counts = [Fraction(0)] * BINS
        for v in values:
            counts[bin_of(v)] += 1
        return [float(c / total) for c in counts]

    histogram = {
        "correct": hist(pos, len(pos)),
        "misclassified": hist(neg, len(neg)),
        "ood": hist(ood_conf, len(ood_conf)),
    }

    predictions = []
    for m, y in TEST_ITEMS:
        predictions.append(
            {
                "mean": [float(p) for p in m],
                "conf": float(max(m)),
                "entropy": entropy(m),
                "mi": 0.0,
                "y": y,
            }
        )
    ood_predictions = []
    for m in OOD_ITEMS:
        ood_predictions.append(
            {
                "mean": [float(p) for p in m],
                "conf": float(max(m)),
                "entropy": entropy(m),
                "mi": 0.0,
                "y": None,
            }
        )

    fixture = {
        "bins": BINS,
        "measure": "confidence",
        "predictions": predictions,
        "ood_predictions": ood_predictions,
        "expected": {
            "accuracy": float(accuracy),
            "ece": float(ece),
            "mce": float(mce),
            "ece_with_ood": float(ece_ood),
            "mce_with_ood": float(mce_ood),
            "nll": nll,
            "brier": float(brier),
            "auroc_misclassification": float(auroc_miss),
            "aupr_misclassification": float(aupr_miss),
            "auroc_ood": float(auroc_ood),
            "aupr_ood": float(aupr_ood),
            "histogram": histogram,
        },
        "expected_exact": {
            "accuracy": str(accuracy),
            "ece": str(ece),
            "mce": str(mce),
            "ece_with_ood": str(ece_ood),
            "mce_with_ood": str(mce_ood),
            "brier": str(brier),
            "auroc_misclassification": str(auroc_miss),
            "aupr_misclassification": str(aupr_miss),
            "auroc_ood": str(auroc_ood),
            "aupr_ood": str(aupr_ood),
        },
    }
    out = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "metrics_fixture.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(fixture, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {out}")
    for key, value in fixture["expected"].items():
        if key != "histogram":
            print(f"  {key}: {value}")


if __name__ == "__main__":
    main()
