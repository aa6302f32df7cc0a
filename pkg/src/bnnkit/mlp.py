"""Multi-layer perceptron with concrete-dropout layers.

The network is a tanh MLP whose per-layer dropout rates are trainable
through a continuous relaxation of Bernoulli masks. Training minimizes a
mini-batch estimate of the negative evidence lower bound (rescaled data
NLL plus a weight/dropout regularizer) with RMSprop and early stopping.
All gradients are computed by hand-written backprop so they can be checked
against finite differences with frozen mask noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import NumericalError, RngStream, softmax

DEFAULT_TEMPERATURE = 0.1
DEFAULT_DROPOUT_INIT = 0.1
DEFAULT_HIDDEN = (64, 64)
VARIANTS = ("cdp", "deterministic-dropout", "plain")

_U_EPS = 1e-12


@dataclass
class Layer:
    w: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)
    rho: float | None = None  # dropout logit on this layer's input; None = no dropout

    @property
    def p(self) -> float | None:
        return None if self.rho is None else float(_sigmoid(self.rho))

    def copy(self) -> "Layer":
        return Layer(self.w.copy(), self.b.copy(), self.rho)


@dataclass
class MlpParams:
    layers: list[Layer]
    class_count: int
    input_dim: int
    variant: str = "cdp"

    def copy(self) -> "MlpParams":
        return MlpParams([l.copy() for l in self.layers], self.class_count, self.input_dim, self.variant)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    rms_decay: float = 0.9
    l2_coeff: float = 3.5e-6
    dropout_reg_coeff: float = 1e-5
    temperature: float = DEFAULT_TEMPERATURE
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    dataset_size: int | None = None  # the N of the rescaled data term; defaults to train-split size
    hidden: tuple = DEFAULT_HIDDEN
    stream: RngStream = field(default_factory=lambda: RngStream(0))

    def __post_init__(self):
        if self.learning_rate <= 0 or not (0 < self.rms_decay < 1) or self.batch_size < 1:
            raise ValueError("training hyperparameters must be positive")
        if self.l2_coeff < 0 or self.dropout_reg_coeff < 0:
            raise ValueError("regularization coefficients must be non-negative")
        if not (0 < self.temperature <= 1):
            raise ValueError(f"temperature must lie in (0, 1], got {self.temperature}")


@dataclass
class ForwardTrace:
    inputs: list  # per layer: pre-dropout activation (K, fan_in)
    masks: list  # per layer: sampled relaxed mask (fan_in,) or None
    preacts: list  # per layer: (K, fan_out)
    postacts: list  # per layer: (K, fan_out)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def concrete_mask(p, t: float, u):
    """Relaxed dropout mask: sigmoid((logit(p) + logit(u)) / t).

    Values near 1 mean "drop"; a layer multiplies its input by (1-z)/(1-p).
    Differentiable in p for fixed u. Arguments must lie in the open (0, 1).
    """
    p = np.asarray(p, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if np.any(p <= 0) or np.any(p >= 1) or np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("concrete_mask arguments must lie strictly inside (0, 1)")
    if t <= 0 or t > 1:
        raise ValueError(f"temperature must lie in (0, 1], got {t}")
    logit_p = np.log(p) - np.log1p(-p)
    logit_u = np.log(u) - np.log1p(-u)
    return _sigmoid((logit_p + logit_u) / t)


def init_params(
    input_dim: int,
    class_count: int,
    stream: RngStream,
    hidden: tuple = DEFAULT_HIDDEN,
    variant: str = "cdp",
    dropout_init: float = DEFAULT_DROPOUT_INIT,
) -> MlpParams:
    """Fresh network d -> hidden -> C; dropout sits on the inputs of every
    trainable layer after the first (none at all for the plain variant)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    sizes = (input_dim, *hidden, class_count)
    rho0 = float(np.log(dropout_init) - np.log1p(-dropout_init))
    layers = []
    for l in range(len(sizes) - 1):
        gen = stream.derive("layer", l).generator()
        w = gen.standard_normal((sizes[l], sizes[l + 1])) / np.sqrt(sizes[l])
        b = np.zeros(sizes[l + 1])
        rho = rho0 if (variant != "plain" and l > 0) else None
        layers.append(Layer(w, b, rho))
    return MlpParams(layers, class_count, input_dim, variant)


def sample_masks(params: MlpParams, stream: RngStream, temperature: float = DEFAULT_TEMPERATURE):
    """One relaxed mask vector per dropout layer (shared across a batch)."""
    masks = []
    for l, layer in enumerate(params.layers):
        if layer.rho is None:
            masks.append(None)
        else:
            u = stream.derive("mask", l).generator().random(layer.w.shape[0])
            u = np.clip(u, _U_EPS, 1.0 - _U_EPS)
            masks.append(concrete_mask(layer.p, temperature, u))
    return masks


def mean_masks(params: MlpParams):
    """Masks forced to their mean; the (1-z)/(1-p) scaling then equals 1."""
    return [None if l.rho is None else np.full(l.w.shape[0], l.p) for l in params.layers]


def forward_batch(
    params: MlpParams,
    x: np.ndarray,
    mode: str = "deterministic",
    stream: RngStream | None = None,
    temperature: float = DEFAULT_TEMPERATURE,
    masks: list | None = None,
    weights: list | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Run the network on a (K, d) batch, returning logits and a full trace.

    `mode` is "deterministic" (no masks) or "stochastic" (one mask draw per
    dropout layer, shared across the batch). Explicit `masks` override the
    mode; `weights` optionally substitutes per-layer (w, b) pairs.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.input_dim:
        raise ValueError(f"input dimension {x.shape[1]} != model dimension {params.input_dim}")
    if masks is None:
        if mode == "deterministic":
            masks = [None] * len(params.layers)
        elif mode == "stochastic":
            if stream is None:
                raise ValueError("stochastic forward needs an RngStream")
            masks = sample_masks(params, stream, temperature)
        else:
            raise ValueError(f"unknown forward mode {mode!r}")
    trace = ForwardTrace([], list(masks), [], [])
    a = x
    last = len(params.layers) - 1
    for l, layer in enumerate(params.layers):
        w, b = (layer.w, layer.b) if weights is None else weights[l]
        trace.inputs.append(a)
        h = a if masks[l] is None else a * ((1.0 - masks[l]) / (1.0 - layer.p))
        s = h @ w + b
        a = np.tanh(s) if l < last else s
        trace.preacts.append(s)
        trace.postacts.append(a)
    return a, trace


def forward(params, x, mode="deterministic", stream=None, temperature=DEFAULT_TEMPERATURE):
    """Single-input forward pass; returns (logits vector, trace)."""
    logits, trace = forward_batch(params, np.atleast_2d(x), mode, stream, temperature)
    return logits[0], trace


@dataclass
class LayerGrads:
    w: np.ndarray
    b: np.ndarray
    rho: float | None


def regularizer(params: MlpParams, cfg: TrainConfig) -> float:
    """L2 on weights (dropout-coupled) and biases, plus the dropout-rate
    entropy term on every dropout layer."""
    total = 0.0
    for layer in params.layers:
        p = 0.0 if layer.rho is None else layer.p
        total += cfg.l2_coeff * (np.sum(layer.w**2) / (1.0 - p) + np.sum(layer.b**2))
        if layer.rho is not None:
            fan_in = layer.w.shape[0]
            total += cfg.dropout_reg_coeff * fan_in * (p * np.log(p) + (1.0 - p) * np.log1p(-p))
    return float(total)


def elbo_loss_and_grads(
    params: MlpParams,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    stream: RngStream,
) -> tuple[float, list[LayerGrads]]:
    """Single-sample estimate of the variational objective and its exact
    gradient w.r.t. weights, biases, and dropout logits.

    loss = (N/K) * sum_batch NLL(softmax(stochastic forward)) + regularizer,
    with one shared mask draw per dropout layer per call so that finite
    differences with the same stream see frozen noise.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    k = x.shape[0]
    n = cfg.dataset_size if cfg.dataset_size else k
    masks = sample_masks(params, stream, cfg.temperature)
    logits, trace = forward_batch(params, x, masks=masks)
    for l, s in enumerate(trace.preacts):
        if not np.all(np.isfinite(s)):
            raise NumericalError(f"non-finite pre-activation at layer {l}")

    probs = softmax(logits)
    nll = float(np.mean(_batch_nll(logits, y)))
    scale = n / k
    data_loss = scale * k * nll  # == (N/K) * sum of per-item NLL

    loss = data_loss + regularizer(params, cfg)
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss (regularizer)")

    ds = probs.copy()
    ds[np.arange(k), y] -= 1.0
    ds *= scale
    grads: list[LayerGrads] = [None] * len(params.layers)  # type: ignore[list-item]
    for l in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[l]
        a_in = trace.inputs[l]
        z = masks[l]
        p = 0.0 if layer.rho is None else layer.p
        h = a_in if z is None else a_in * ((1.0 - z) / (1.0 - p))
        gw = h.T @ ds + 2.0 * cfg.l2_coeff * layer.w / (1.0 - p)
        gb = ds.sum(axis=0) + 2.0 * cfg.l2_coeff * layer.b
        dh = ds @ layer.w.T
        grho = None
        if z is None:
            da = dh
        else:
            da = dh * ((1.0 - z) / (1.0 - p))
            if params.variant == "cdp":
                dscale = np.sum(dh * a_in, axis=0)
                dscale_drho = (-z * (1.0 - z) / cfg.temperature + (1.0 - z) * p) / (1.0 - p)
                grho = float(np.dot(dscale, dscale_drho))
                grho += cfg.l2_coeff * np.sum(layer.w**2) * p / (1.0 - p)
                fan_in = layer.w.shape[0]
                grho += cfg.dropout_reg_coeff * fan_in * layer.rho * p * (1.0 - p)
            else:
                grho = 0.0
        grads[l] = LayerGrads(gw, gb, grho)
        if l > 0:
            ds = da * (1.0 - trace.postacts[l - 1] ** 2)
    return float(loss), grads


def _batch_nll(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return lse - logits[np.arange(len(y)), y]


def dataset_nll(params: MlpParams, x: np.ndarray, y: np.ndarray) -> float:
    """Mean deterministic-forward NLL, used for early stopping."""
    logits, _ = forward_batch(params, x)
    return float(np.mean(_batch_nll(logits, np.asarray(y, dtype=np.int64))))


def accuracy(params: MlpParams, x: np.ndarray, y: np.ndarray) -> float:
    logits, _ = forward_batch(params, x)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


def train(cfg: TrainConfig, data, variant: str = "cdp", init: MlpParams | None = None) -> MlpParams:
    """RMSprop training with early stopping on validation NLL.

    Returns the best-validation snapshot. `init` warm-starts fine-tuning;
    otherwise parameters are freshly initialized from cfg.stream.
    """
    train_idx = data.indices("train")
    val_idx = data.indices("validation")
    if train_idx.size == 0 or val_idx.size == 0:
        raise ValueError("training needs non-empty train and validation splits")
    if init is not None:
        params = init.copy()
        variant = params.variant
    else:
        params = init_params(data.dim, data.class_count, cfg.stream.derive("init"),
                             hidden=cfg.hidden, variant=variant)
    cfg_n = cfg.dataset_size if cfg.dataset_size else int(train_idx.size)

    vel = [
        {"w": np.zeros_like(l.w), "b": np.zeros_like(l.b), "rho": 0.0}
        for l in params.layers
    ]
    xs, ys = data.features, data.labels
    xv, yv = xs[val_idx], ys[val_idx]
    run_cfg = TrainConfig(**{**cfg.__dict__, "dataset_size": cfg_n})
    best_nll = np.inf
    best = params.copy()
    stale = 0
    eps = 1e-8

    def rms_step(value, grad, state, key):
        state[key] = cfg.rms_decay * state[key] + (1.0 - cfg.rms_decay) * grad**2
        return value - cfg.learning_rate * grad / (np.sqrt(state[key]) + eps)

    for epoch in range(cfg.max_epochs):
        order = cfg.stream.derive("shuffle", epoch).generator().permutation(train_idx.size)
        shuffled = train_idx[order]
        for bi, start in enumerate(range(0, shuffled.size, cfg.batch_size)):
            batch = shuffled[start : start + cfg.batch_size]
            _, grads = elbo_loss_and_grads(
                params, xs[batch], ys[batch], run_cfg, cfg.stream.derive("noise", epoch, bi)
            )
            for layer, g, v in zip(params.layers, grads, vel):
                layer.w = rms_step(layer.w, g.w, v, "w")
                layer.b = rms_step(layer.b, g.b, v, "b")
                if g.rho is not None and variant == "cdp":
                    v["rho"] = cfg.rms_decay * v["rho"] + (1.0 - cfg.rms_decay) * g.rho**2
                    layer.rho = float(layer.rho - cfg.learning_rate * g.rho / (np.sqrt(v["rho"]) + eps))
        val_nll = dataset_nll(params, xv, yv)
        if val_nll < best_nll:
            best_nll = val_nll
            best = params.copy()
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    return best


# ---------------------------------------------------------------------------
# checkpoints


def save_model(params: MlpParams, path) -> None:
    payload = {
        "layers": [
            {"w": l.w.tolist(), "b": l.b.tolist(), "rho": l.rho} for l in params.layers
        ],
        "c": params.class_count,
        "d": params.input_dim,
        "variant": params.variant,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_model(path) -> MlpParams:
    from .data import SchemaError

    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        layers = [
            Layer(
                np.asarray(entry["w"], dtype=np.float64),
                np.asarray(entry["b"], dtype=np.float64),
                None if entry["rho"] is None else float(entry["rho"]),
            )
            for entry in raw["layers"]
        ]
        params = MlpParams(layers, int(raw["c"]), int(raw["d"]), str(raw["variant"]))
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: missing model field {exc}") from exc
    if params.variant not in VARIANTS:
        raise SchemaError(f"{path}: unknown variant {params.variant!r}")
    for i, layer in enumerate(params.layers[:-1]):
        if layer.w.shape[1] != params.layers[i + 1].w.shape[0]:
            raise SchemaError(f"{path}: layer {i} fan-out does not chain into layer {i + 1}")
    return params
