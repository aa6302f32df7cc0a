"""Kronecker-factored Laplace posterior over a trained network.

Each layer's curvature is approximated by two moment matrices: the expected
outer product of its (bias-extended) inputs and the expected outer product
of the NLL gradient at the true label w.r.t. its pre-activations. The
posterior over the bias-extended weight matrix is matrix normal around the
trained point estimate, with row/column precision factors
sqrt(n_scale) * factor + sqrt(tau) * I held as Cholesky decompositions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .mlp import Layer, MlpParams, forward_batch
from .numerics import DecompositionError, RngStream, cholesky, softmax


@dataclass
class KfacFactors:
    input_moments: list  # per layer: ((fan_in+1), (fan_in+1)) symmetric PSD
    grad_moments: list  # per layer: (fan_out, fan_out) symmetric PSD
    sample_count: int


@dataclass
class LaplacePosterior:
    means: list  # per layer: (fan_in+1, fan_out), bias row last
    chol_rows: list  # per layer: lower Cholesky of the row precision factor
    chol_cols: list  # per layer: lower Cholesky of the column precision factor
    n_scale: float
    tau: float

    @property
    def layer_count(self) -> int:
        return len(self.means)


def per_item_stats(params: MlpParams, x: np.ndarray, y: np.ndarray):
    """Per-layer (bias-extended inputs, per-item pre-activation NLL gradients)
    under a deterministic forward pass. Rows index items."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    logits, trace = forward_batch(params, x)
    k = x.shape[0]
    ds = softmax(logits)
    ds[np.arange(k), y] -= 1.0
    stats = [None] * len(params.layers)
    for l in range(len(params.layers) - 1, -1, -1):
        a_in = trace.inputs[l]
        abar = np.hstack([a_in, np.ones((k, 1))])
        stats[l] = (abar, ds)
        if l > 0:
            ds = (ds @ params.layers[l].w.T) * (1.0 - trace.postacts[l - 1] ** 2)
    return stats


def fit_kfac(params: MlpParams, x: np.ndarray, y: np.ndarray) -> KfacFactors:
    """Running means of input and pre-activation-gradient outer products over
    the given items (empirical Fisher: gradients at the true labels)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("cannot fit curvature factors on empty data")
    stats = per_item_stats(params, x, np.asarray(y, dtype=np.int64))
    k = x.shape[0]
    input_moments = [abar.T @ abar / k for abar, _ in stats]
    grad_moments = [g.T @ g / k for _, g in stats]
    return KfacFactors(input_moments, grad_moments, k)


def build_posterior(
    factors: KfacFactors, params: MlpParams, n_scale: float = 1.0, tau: float = 15.0
) -> LaplacePosterior:
    """Matrix-normal posterior factors sqrt(n_scale)*moment + sqrt(tau)*I."""
    if n_scale <= 0:
        raise ValueError(f"n_scale must be > 0, got {n_scale}")
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    means, chol_rows, chol_cols = [], [], []
    sn, st = np.sqrt(n_scale), np.sqrt(tau)
    for l, layer in enumerate(params.layers):
        means.append(np.vstack([layer.w, layer.b[None, :]]))
        row = sn * factors.input_moments[l] + st * np.eye(factors.input_moments[l].shape[0])
        col = sn * factors.grad_moments[l] + st * np.eye(factors.grad_moments[l].shape[0])
        try:
            chol_rows.append(cholesky(row))
            chol_cols.append(cholesky(col))
        except DecompositionError as exc:
            raise DecompositionError(
                f"layer {l} posterior factor is not positive definite ({exc}); "
                "increase tau to regularize"
            ) from exc
    return LaplacePosterior(means, chol_rows, chol_cols, float(n_scale), float(tau))


def _inverse_factors(post: LaplacePosterior, l: int):
    lr, lc = post.chol_rows[l], post.chol_cols[l]
    row_inv_t = solve_triangular(lr, np.eye(lr.shape[0]), lower=True).T  # L_R^{-T}
    col_inv = solve_triangular(lc, np.eye(lc.shape[0]), lower=True)  # L_C^{-1}
    return row_inv_t, col_inv


def sample_weight_draws(post: LaplacePosterior, stream: RngStream, count: int) -> list:
    """`count` posterior draws; element [t][l] is the bias-extended weight
    matrix of layer l in draw t. Deterministic per stream."""
    draws_per_layer = []
    for l, mean in enumerate(post.means):
        gen = stream.derive("z", l).generator()
        z = gen.standard_normal((count, *mean.shape))
        row_inv_t, col_inv = _inverse_factors(post, l)
        deltas = np.einsum("ij,njk,kl->nil", row_inv_t, z, col_inv)
        draws_per_layer.append(mean[None] + deltas)
    return [[draws_per_layer[l][t] for l in range(post.layer_count)] for t in range(count)]


def sample_weights(post: LaplacePosterior, stream: RngStream) -> list:
    """One matrix-normal draw per layer (bias row included)."""
    return sample_weight_draws(post, stream, 1)[0]


def split_weights(w_hat: np.ndarray):
    """Split a bias-extended matrix back into (weights, bias)."""
    return w_hat[:-1], w_hat[-1]


def as_params(post: LaplacePosterior, variant: str = "plain") -> MlpParams:
    """Network shell at the posterior mean (no dropout; used for forward passes)."""
    layers = [Layer(*split_weights(m)) for m in post.means]
    return MlpParams(layers, post.means[-1].shape[1], post.means[0].shape[0] - 1, variant)


# ---------------------------------------------------------------------------
# checkpoints


def save_posterior(post: LaplacePosterior, path) -> None:
    payload = {
        "layers": [
            {
                "mean": m.tolist(),
                "chol_row": r.tolist(),
                "chol_col": c.tolist(),
            }
            for m, r, c in zip(post.means, post.chol_rows, post.chol_cols)
        ],
        "n_scale": post.n_scale,
        "tau": post.tau,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_posterior(path) -> LaplacePosterior:
    from .data import SchemaError

    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        means = [np.asarray(e["mean"], dtype=np.float64) for e in raw["layers"]]
        rows = [np.asarray(e["chol_row"], dtype=np.float64) for e in raw["layers"]]
        cols = [np.asarray(e["chol_col"], dtype=np.float64) for e in raw["layers"]]
        post = LaplacePosterior(means, rows, cols, float(raw["n_scale"]), float(raw["tau"]))
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: missing posterior field {exc}") from exc
    for l, (r, c) in enumerate(zip(rows, cols)):
        for name, f in (("chol_row", r), ("chol_col", c)):
            if np.any(np.diag(f) <= 0) or np.any(np.triu(f, 1) != 0):
                raise SchemaError(f"{path}: layer {l} {name} is not lower-triangular with positive diagonal")
    return post
