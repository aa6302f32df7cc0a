"""Monte-Carlo predictive distributions and uncertainty measures.

A predictive estimate is the mean of T softmax draws, where each draw comes
from one posterior sample: a fresh dropout-mask draw (concrete dropout), a
fresh weight draw (Laplace), or the point estimate (deterministic). The
three uncertainty measures are the max of the mean (confidence), the
entropy of the mean, and the epistemic disagreement term
entropy-of-mean minus mean-of-entropies (mutual information). All in nats.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import laplace as lap
from .mlp import DEFAULT_TEMPERATURE, MlpParams, forward_batch, sample_masks
from .numerics import RngStream, softmax

SAMPLERS = ("cdp-masks", "laplace-weights", "deterministic")
DEFAULT_MC_SAMPLES = 50


@dataclass
class PredictiveResult:
    sample_probs: np.ndarray  # (T, C)
    mean_probs: np.ndarray  # (C,), exact row mean of sample_probs

    @property
    def mc_samples(self) -> int:
        return self.sample_probs.shape[0]


@dataclass(frozen=True)
class UncertaintyMeasures:
    confidence: float
    predictive_entropy: float
    mutual_information: float


@dataclass
class Prediction:
    """Interchange record consumed by metrics, CRF smoothing, and adaptation."""

    mean_probs: np.ndarray
    confidence: float
    entropy: float
    mutual_information: float
    label: int | None = None


def _entropy_rows(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(p > 0, p * np.log(p), 0.0)
    return -term.sum(axis=-1)


def measures(result: PredictiveResult) -> UncertaintyMeasures:
    mean = result.mean_probs
    h_mean = max(float(_entropy_rows(mean[None])[0]), 0.0)
    h_rows = float(np.mean(_entropy_rows(result.sample_probs)))
    mi = min(max(h_mean - h_rows, 0.0), h_mean)
    return UncertaintyMeasures(float(np.max(mean)), h_mean, mi)


def predict_dataset(
    sampler: str,
    model,
    x: np.ndarray,
    mc_samples: int = DEFAULT_MC_SAMPLES,
    stream: RngStream | None = None,
    temperature: float = DEFAULT_TEMPERATURE,
    per_item: bool = False,
) -> list[PredictiveResult]:
    """MC predictive estimates for every row of x.

    One posterior draw is shared by all items per MC pass; `per_item=True`
    re-draws per item instead (same distribution, more stream derivations).
    `model` is MlpParams for cdp-masks/deterministic and a LaplacePosterior
    for laplace-weights.
    """
    if sampler not in SAMPLERS:
        raise ValueError(f"unknown sampler {sampler!r}")
    if mc_samples < 1:
        raise ValueError(f"need mc_samples >= 1, got {mc_samples}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]

    if sampler == "deterministic":
        probs = softmax(forward_batch(model, x)[0])
        return [
            PredictiveResult(np.tile(p, (mc_samples, 1)), p.copy()) for p in probs
        ]
    if stream is None:
        raise ValueError(f"sampler {sampler!r} needs an RngStream")

    if per_item:
        out = []
        for i in range(n):
            out.append(
                predict_dataset(
                    sampler, model, x[i : i + 1], mc_samples, stream.derive("item", i), temperature
                )[0]
            )
        return out

    sample_probs = np.empty((mc_samples, n, _class_count(sampler, model)))
    if sampler == "cdp-masks":
        for t in range(mc_samples):
            masks = sample_masks(model, stream.derive("pass", t), temperature)
            sample_probs[t] = softmax(forward_batch(model, x, masks=masks)[0])
    else:
        shell = lap.as_params(model)
        draws = lap.sample_weight_draws(model, stream.derive("draws"), mc_samples)
        for t in range(mc_samples):
            weights = [lap.split_weights(w) for w in draws[t]]
            sample_probs[t] = softmax(forward_batch(shell, x, weights=weights)[0])
    return [
        PredictiveResult(sample_probs[:, i], sample_probs[:, i].mean(axis=0)) for i in range(n)
    ]


def _class_count(sampler: str, model) -> int:
    if sampler == "laplace-weights":
        return model.means[-1].shape[1]
    return model.class_count


def predict_mc(
    sampler: str,
    model,
    x: np.ndarray,
    mc_samples: int = DEFAULT_MC_SAMPLES,
    stream: RngStream | None = None,
    temperature: float = DEFAULT_TEMPERATURE,
) -> PredictiveResult:
    """Predictive estimate for a single input vector."""
    return predict_dataset(sampler, model, np.atleast_2d(x), mc_samples, stream, temperature)[0]


def as_predictions(results: list[PredictiveResult], labels=None) -> list[Prediction]:
    """Attach uncertainty measures (and optional true labels) to MC results."""
    out = []
    for i, r in enumerate(results):
        m = measures(r)
        y = None if labels is None else int(labels[i])
        out.append(Prediction(r.mean_probs, m.confidence, m.predictive_entropy, m.mutual_information, y))
    return out


# ---------------------------------------------------------------------------
# interchange file


def save_predictions(preds: list[Prediction], path) -> None:
    payload = [
        {
            "mean": p.mean_probs.tolist(),
            "conf": p.confidence,
            "entropy": p.entropy,
            "mi": p.mutual_information,
            "y": p.label,
        }
        for p in preds
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_predictions(path) -> list[Prediction]:
    from .data import SchemaError

    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    preds = []
    for i, entry in enumerate(raw):
        try:
            mean = np.asarray(entry["mean"], dtype=np.float64)
            pred = Prediction(
                mean,
                float(entry["conf"]),
                float(entry["entropy"]),
                float(entry["mi"]),
                None if entry["y"] is None else int(entry["y"]),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"{path}: prediction {i} missing field {exc}") from exc
        if np.any(mean < 0) or abs(mean.sum() - 1.0) > 1e-9:
            raise SchemaError(f"{path}: prediction {i} field 'mean' is not on the simplex")
        preds.append(pred)
    return preds
