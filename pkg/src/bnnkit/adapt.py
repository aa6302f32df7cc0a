"""Uncertainty-gated semi-supervised domain adaptation.

Pipeline: train a base classifier on source data, Monte-Carlo predict on a
shifted unlabeled pool, calibrate a confidence threshold on a small labeled
calibration subset so that gated predictions hit a target accuracy,
pseudo-label the confident pool items, optionally add a small random
manually-labeled set, balance classes by jittered duplication, fine-tune
from the base parameters, and evaluate on shifted test data. Ground-truth
labels of pool items are only ever read through the calibration subset, the
manual-labeling oracle, and post-hoc audits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import crf as crfmod
from . import predictive as pred
from .data import Dataset, SceneSet, with_unaries
from .mlp import MlpParams, TrainConfig, train
from .numerics import RngStream

CONDITIONS = ("no-finetune", "auto-only", "manual-only", "auto-manual")
BALANCE_POLICIES = ("none", "jitter-duplicate")


@dataclass
class AdaptConfig:
    target_accuracy: float = 0.95
    calib_fraction: float = 0.01
    manual_fraction: float = 0.01
    auto_fraction_cap: float | None = None
    per_class_top_k: bool = False  # ablation only; decreased performance upstream
    balance_policy: str = "jitter-duplicate"
    jitter_scale: float = 0.1
    gating_measure: str = "confidence"  # confidence | entropy | mutual-information
    sampler: str = "cdp-masks"
    mc_samples: int = 50
    variant: str = "cdp"
    base_train: TrainConfig = field(default_factory=TrainConfig)
    fine_tune: dict = field(default_factory=dict)  # TrainConfig overrides
    conditions: tuple = CONDITIONS
    manual_val_fraction: float = 0.25
    rounds: int = 1
    scene_train_fraction: float = 0.5
    crf_train: crfmod.CrfTrainConfig | None = None
    stream: RngStream = field(default_factory=lambda: RngStream(0))

    def __post_init__(self):
        if not (0 < self.target_accuracy <= 1):
            raise ValueError(f"target accuracy must lie in (0, 1], got {self.target_accuracy}")
        for name in ("calib_fraction", "manual_fraction", "manual_val_fraction"):
            v = getattr(self, name)
            if not (0 <= v <= 1):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.balance_policy not in BALANCE_POLICIES:
            raise ValueError(f"unknown balance policy {self.balance_policy!r}")
        for c in self.conditions:
            if c not in CONDITIONS:
                raise ValueError(f"unknown condition {c!r}")


@dataclass
class AdaptReport:
    threshold: float
    threshold_qualified: bool
    calib_size: int
    auto_size: int
    auto_accuracy: float | None
    manual_size: int
    class_counts_before: dict
    class_counts_after: dict
    accuracies: dict
    crf_unary_accuracy: float | None = None
    crf_smoothed_accuracy: float | None = None


def calibrate_threshold(calib: list, target: float) -> tuple[float, bool]:
    """Smallest observed score delta with accuracy(score >= delta) >= target.

    `calib` holds (score, correct) pairs. When no delta qualifies, returns
    (just above max score, False) so the gate admits nothing.
    """
    if not calib:
        raise ValueError("calibration list is empty")
    scores = np.asarray([c[0] for c in calib], dtype=np.float64)
    correct = np.asarray([bool(c[1]) for c in calib])
    order = np.argsort(-scores, kind="stable")
    scores, correct = scores[order], correct[order]
    cum_correct = np.cumsum(correct)
    counts = np.arange(1, scores.size + 1)
    best = None
    i = 0
    while i < scores.size:
        j = i
        while j < scores.size and scores[j] == scores[i]:
            j += 1
        acc = cum_correct[j - 1] / counts[j - 1]
        if acc >= target:
            best = scores[i]  # descending scan: last qualifying value is the smallest
        i = j
    if best is None:
        return float(np.nextafter(scores[0], np.inf)), False
    return float(best), True


def auto_label(pool_preds: list, threshold: float, measure: str = "confidence"):
    """Indices, pseudo-labels, and scores of pool predictions past the gate."""
    from .metrics import oriented_score

    selected = []
    for i, p in enumerate(pool_preds):
        score = oriented_score(p, measure)
        if score >= threshold:
            selected.append((i, int(np.argmax(p.mean_probs)), float(score)))
    return selected


def manual_label(pool_size: int, fraction: float, oracle_labels, stream: RngStream, exclude=()):
    """Uniform sample (no replacement) of pool indices outside `exclude`,
    labeled by the oracle. Empty with a warning-size when fraction*|pool| < 1."""
    if not (0 <= fraction <= 1):
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    candidates = np.setdiff1d(np.arange(pool_size), np.asarray(list(exclude), dtype=np.int64))
    count = int(np.floor(fraction * pool_size))
    count = min(count, candidates.size)
    if count == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    pick = stream.derive("manual").generator().choice(candidates, size=count, replace=False)
    pick = np.sort(pick)
    return pick, np.asarray(oracle_labels)[pick]


def balance(features, labels, policy: str, jitter_scale: float, stream: RngStream):
    """jitter-duplicate: upsample minority classes with Gaussian feature noise
    until every represented class matches the majority count."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if policy == "none":
        return features, labels
    if policy != "jitter-duplicate":
        raise ValueError(f"unknown balance policy {policy!r}")
    present, counts = np.unique(labels, return_counts=True)
    target = counts.max()
    extra_x, extra_y = [], []
    for c, count in zip(present, counts):
        need = int(target - count)
        if need == 0:
            continue
        idx = np.flatnonzero(labels == c)
        gen = stream.derive("balance", int(c)).generator()
        dup = idx[gen.integers(idx.size, size=need)]
        extra_x.append(features[dup] + jitter_scale * gen.standard_normal((need, features.shape[1])))
        extra_y.append(np.full(need, c, dtype=np.int64))
    if not extra_x:
        return features, labels
    return np.vstack([features, *extra_x]), np.concatenate([labels, *extra_y])


def _predict(cfg: AdaptConfig, params: MlpParams, x: np.ndarray, stream: RngStream):
    results = pred.predict_dataset(cfg.sampler, params, x, cfg.mc_samples, stream)
    return pred.as_predictions(results)


def _test_accuracy(cfg, params, test: Dataset, stream) -> float:
    preds = _predict(cfg, params, test.features, stream)
    labels = np.asarray([np.argmax(p.mean_probs) for p in preds])
    return float(np.mean(labels == test.labels))


def _fine_tune(cfg: AdaptConfig, base: MlpParams, feats, labels, val_feats, val_labels):
    ft_cfg = TrainConfig(**{**cfg.base_train.__dict__, **cfg.fine_tune})
    n_train = len(labels)
    data = Dataset(
        np.vstack([feats, val_feats]),
        np.concatenate([np.asarray(labels, dtype=np.int64), np.asarray(val_labels, dtype=np.int64)]),
        base.class_count,
        np.asarray(["train"] * n_train + ["validation"] * len(val_labels)),
    )
    ft_cfg = replace(ft_cfg, dataset_size=n_train, stream=cfg.stream.derive("fine-tune"))
    return train(ft_cfg, data, init=base)


def run_adaptation(
    cfg: AdaptConfig,
    source: Dataset,
    target: Dataset,
    base: MlpParams | None = None,
    scenes: SceneSet | None = None,
    out_dir=None,
) -> AdaptReport:
    """Full adaptation pipeline; see module docstring.

    `target` must carry pool and test splits (a calibration split is carved
    from the pool when absent). Per-stage artifacts are written under
    out_dir when given.
    """
    if base is None:
        base_cfg = replace(cfg.base_train, stream=cfg.stream.derive("base-train"))
        base = train(base_cfg, source, variant=cfg.variant)

    pool_idx = target.indices("pool")
    test_idx = target.indices("test")
    calib_idx = target.indices("calibration")
    if pool_idx.size == 0 or test_idx.size == 0:
        raise ValueError("target data needs pool and test splits")
    if calib_idx.size == 0:
        carve = max(1, int(np.floor(cfg.calib_fraction * pool_idx.size)))
        gen = cfg.stream.derive("calib-carve").generator()
        calib_idx = np.sort(gen.choice(pool_idx, size=carve, replace=False))
        pool_idx = np.setdiff1d(pool_idx, calib_idx)

    pool = target.subset(pool_idx)
    test = target.subset(test_idx)
    calib = target.subset(calib_idx)

    # stage: MC prediction on pool + calibration items with the base model
    pool_preds = _predict(cfg, base, pool.features, cfg.stream.derive("pool-pred"))
    calib_preds = _predict(cfg, base, calib.features, cfg.stream.derive("calib-pred"))

    # stage: threshold calibration on the (manually labeled) calibration subset
    from .metrics import oriented_score

    calib_pairs = [
        (oriented_score(p, cfg.gating_measure), int(np.argmax(p.mean_probs)) == int(y))
        for p, y in zip(calib_preds, calib.labels)
    ]
    threshold, qualified = calibrate_threshold(calib_pairs, cfg.target_accuracy)

    # stage: automatic labeling
    auto = auto_label(pool_preds, threshold, cfg.gating_measure)
    if cfg.auto_fraction_cap is not None and auto:
        cap = int(np.floor(cfg.auto_fraction_cap * pool_idx.size))
        if cfg.per_class_top_k:
            per_class = max(1, cap // base.class_count)
            by_class = {}
            for entry in auto:
                by_class.setdefault(entry[1], []).append(entry)
            auto = [
                e
                for entries in by_class.values()
                for e in sorted(entries, key=lambda e: -e[2])[:per_class]
            ]
            auto.sort(key=lambda e: e[0])
        else:
            auto = sorted(sorted(auto, key=lambda e: -e[2])[:cap], key=lambda e: e[0])
    auto_idx = np.asarray([e[0] for e in auto], dtype=np.int64)
    auto_labels = np.asarray([e[1] for e in auto], dtype=np.int64)

    # stage: manual labeling (oracle = withheld ground truth at desk scale)
    manual_idx, manual_labels = manual_label(
        len(pool), cfg.manual_fraction, pool.labels, cfg.stream.derive("manual-pick")
    )

    # evaluation-only audit; never feeds training
    auto_accuracy = (
        float(np.mean(auto_labels == pool.labels[auto_idx])) if auto_idx.size else None
    )

    manual_train_idx, manual_val_idx = _split_manual(cfg, manual_idx)
    val_src = source.split("validation")
    if manual_val_idx.size:
        val_feats, val_labels = pool.features[manual_val_idx], pool.labels[manual_val_idx]
    else:
        val_feats, val_labels = val_src.features, val_src.labels

    counts_before: dict = {}
    counts_after: dict = {}
    accuracies: dict = {}
    final_model = base
    for condition in cfg.conditions:
        if condition == "no-finetune":
            accuracies[condition] = _test_accuracy(cfg, base, test, cfg.stream.derive("eval", condition))
            continue
        if condition == "auto-only":
            feats = pool.features[auto_idx]
            labels = auto_labels
            policy = "none"
        elif condition == "manual-only":
            feats = pool.features[manual_train_idx]
            labels = pool.labels[manual_train_idx]
            policy = "none"
        else:  # auto-manual
            keep = ~np.isin(auto_idx, manual_idx)  # manual labels win on overlap
            feats = np.vstack([pool.features[auto_idx[keep]], pool.features[manual_train_idx]])
            labels = np.concatenate([auto_labels[keep], pool.labels[manual_train_idx]])
            policy = cfg.balance_policy
        if len(labels) == 0:
            accuracies[condition] = None
            continue
        if condition == "auto-manual":
            uniq, cnt = np.unique(labels, return_counts=True)
            counts_before = {int(u): int(c) for u, c in zip(uniq, cnt)}
        feats, labels = balance(feats, labels, policy, cfg.jitter_scale, cfg.stream.derive("balance", condition))
        if condition == "auto-manual":
            uniq, cnt = np.unique(labels, return_counts=True)
            counts_after = {int(u): int(c) for u, c in zip(uniq, cnt)}
        model = _fine_tune(cfg, base, feats, labels, val_feats, val_labels)
        accuracies[condition] = _test_accuracy(cfg, model, test, cfg.stream.derive("eval", condition))
        final_model = model

    report = AdaptReport(
        threshold=threshold,
        threshold_qualified=qualified,
        calib_size=int(calib_idx.size),
        auto_size=int(auto_idx.size),
        auto_accuracy=auto_accuracy,
        manual_size=int(manual_idx.size),
        class_counts_before=counts_before,
        class_counts_after=counts_after,
        accuracies=accuracies,
    )

    if scenes is not None:
        report.crf_unary_accuracy, report.crf_smoothed_accuracy = _smooth_scenes(
            cfg, final_model, scenes
        )

    if out_dir is not None:
        _write_artifacts(out_dir, report, auto, manual_idx.tolist())
    return report


def _split_manual(cfg: AdaptConfig, manual_idx: np.ndarray):
    if manual_idx.size == 0:
        return manual_idx, manual_idx
    n_val = int(np.floor(cfg.manual_val_fraction * manual_idx.size))
    if n_val == 0:
        return manual_idx, np.empty(0, dtype=np.int64)
    gen = cfg.stream.derive("manual-val").generator()
    val = np.sort(gen.choice(manual_idx, size=n_val, replace=False))
    return np.setdiff1d(manual_idx, val), val


def _smooth_scenes(cfg: AdaptConfig, model: MlpParams, scenes: SceneSet):
    """Fill scene unaries from the adapted model, train the CRF on a scene
    split, and compare unary-argmax vs smoothed accuracy on held-out scenes."""
    filled = []
    for si, scene in enumerate(scenes.scenes):
        if scene.features is None:
            raise ValueError(f"scene {si} carries no features; end-to-end smoothing needs them")
        preds = _predict(cfg, model, scene.features, cfg.stream.derive("scene-pred", si))
        filled.append(with_unaries(scene, np.stack([p.mean_probs for p in preds])))
    n_train = int(np.floor(cfg.scene_train_fraction * len(filled)))
    if n_train == 0 or n_train == len(filled):
        raise ValueError("scene_train_fraction leaves no train or no eval scenes")
    crf_cfg = cfg.crf_train or crfmod.CrfTrainConfig(max_iters=500)
    crf_cfg = replace(crf_cfg, stream=cfg.stream.derive("crf-train"))
    params, _ = crfmod.train_crf(SceneSet(filled[:n_train], scenes.class_count), crf_cfg)
    unary_hits = smoothed_hits = total = 0
    for scene in filled[n_train:]:
        labels, _ = crfmod.smooth(scene, params, crf_cfg.lbp)
        unary_hits += int(np.sum(np.argmax(scene.unaries, axis=1) == scene.labels))
        smoothed_hits += int(np.sum(labels == scene.labels))
        total += scene.size
    return unary_hits / total, smoothed_hits / total


def _write_artifacts(out_dir, report: AdaptReport, auto, manual_indices):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "threshold.json", "w", encoding="utf-8") as fh:
        json.dump(
            {"threshold": report.threshold, "qualified": report.threshold_qualified},
            fh,
            sort_keys=True,
        )
        fh.write("\n")
    with open(out / "auto_set.json", "w", encoding="utf-8") as fh:
        json.dump(
            [{"pool_index": i, "pseudo_label": y, "score": s} for i, y, s in auto],
            fh,
            sort_keys=True,
            indent=1,
        )
        fh.write("\n")
    with open(out / "manual_set.json", "w", encoding="utf-8") as fh:
        json.dump({"pool_indices": manual_indices}, fh, sort_keys=True)
        fh.write("\n")
    save_report(report, out / "adapt_report.json")


def report_to_dict(report: AdaptReport) -> dict:
    return {
        "threshold": report.threshold,
        "threshold_qualified": report.threshold_qualified,
        "calib_size": report.calib_size,
        "auto_size": report.auto_size,
        "auto_accuracy": report.auto_accuracy,
        "manual_size": report.manual_size,
        "class_counts_before": report.class_counts_before,
        "class_counts_after": report.class_counts_after,
        "accuracies": report.accuracies,
        "crf_unary_accuracy": report.crf_unary_accuracy,
        "crf_smoothed_accuracy": report.crf_smoothed_accuracy,
    }


def save_report(report: AdaptReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report), fh, sort_keys=True, indent=1)
        fh.write("\n")
