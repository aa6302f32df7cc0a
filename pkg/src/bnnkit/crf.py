"""Pairwise CRF over scene instances with two log-linear weights.

The joint over a scene's labels is proportional to
exp(theta_u * sum_i unary_i[y_i] + theta_p * sum_{(i,j) in E} M[y_i, y_j])
with M the scene's binary co-occurrence matrix and E the edge set (all
unordered pairs by default). Inference is sum-product loopy belief
propagation with a synchronous flooding schedule, log-space message
computation, and probability-space damping; an enumeration oracle provides
exact marginals and the partition function on small scenes. Training
minimizes the negative log likelihood with momentum SGD.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Scene, SceneSet
from .numerics import RngStream

MAX_ENUMERATION = 1_000_000


class CrfDivergenceError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class CrfParams:
    theta_u: float = 1.0
    theta_p: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.theta_u) and np.isfinite(self.theta_p)):
            raise ValueError("CRF weights must be finite")


@dataclass(frozen=True)
class LbpConfig:
    max_iters: int = 100
    tol: float = 1e-6
    damping: float = 0.5

    def __post_init__(self):
        if self.tol <= 0 or not (0 <= self.damping < 1) or self.max_iters < 1:
            raise ValueError("invalid LBP configuration")


@dataclass
class Beliefs:
    node: np.ndarray  # (n, C) simplex rows
    pair: dict  # (i, j) with i<j -> (C, C) joint table
    converged: bool
    iters_used: int


@dataclass
class ExactMarginals:
    node: np.ndarray
    pair: dict
    log_z: float


def all_pairs(n: int):
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def _feature_values(scene: Scene, labels, edges) -> tuple[float, float]:
    labels = np.asarray(labels)
    f_u = float(scene.unaries[np.arange(scene.size), labels].sum())
    f_p = float(sum(scene.cooc[labels[i], labels[j]] for i, j in edges))
    return f_u, f_p


def lbp(scene: Scene, params: CrfParams, cfg: LbpConfig = LbpConfig(), edges=None) -> Beliefs:
    """Sum-product LBP; `edges` restricts the graph (defaults to all pairs)."""
    n, c = scene.size, scene.class_count
    log_node = params.theta_u * scene.unaries  # (n, C)
    if edges is None:
        edges = all_pairs(n)
    if n == 1 or not edges:
        node = np.exp(log_node - _lse_rows(log_node))
        return Beliefs(node, {}, True, 0)

    src = np.fromiter((e[d] for e in edges for d in (0, 1)), dtype=np.int64)
    dst = np.fromiter((e[1 - d] for e in edges for d in (0, 1)), dtype=np.int64)
    m = src.size  # directed edge count; 2k and 2k+1 are reverses of each other
    rev = np.arange(m) ^ 1
    edge_exp = np.exp(params.theta_p * scene.cooc.astype(np.float64))  # (C, C)

    msg = np.full((m, c), 1.0 / c)
    converged = False
    iters = 0
    for iters in range(1, cfg.max_iters + 1):
        log_msg = np.log(msg)
        s = log_node.copy()
        np.add.at(s, dst, log_msg)
        base = s[src] - log_msg[rev]
        peak = base.max(axis=1, keepdims=True)
        upd = np.log((np.exp(base - peak)) @ edge_exp) + peak
        upd -= _lse_rows(upd)
        upd = np.exp(upd)
        upd /= upd.sum(axis=1, keepdims=True)
        new = cfg.damping * msg + (1.0 - cfg.damping) * upd
        delta = np.max(np.abs(new - msg))
        msg = new
        if delta < cfg.tol:
            converged = True
            break

    log_msg = np.log(msg)
    s = log_node.copy()
    np.add.at(s, dst, log_msg)
    node = np.exp(s - _lse_rows(s))
    node /= node.sum(axis=1, keepdims=True)

    pair = {}
    log_edge = params.theta_p * scene.cooc.astype(np.float64)
    for k, (i, j) in enumerate(edges):
        li = s[i] - log_msg[2 * k + 1]  # message j->i excluded
        lj = s[j] - log_msg[2 * k]  # message i->j excluded
        table = li[:, None] + lj[None, :] + log_edge
        table -= table.max()
        table = np.exp(table)
        pair[(i, j)] = table / table.sum()
    return Beliefs(node, pair, converged, iters)


def _lse_rows(a: np.ndarray) -> np.ndarray:
    peak = a.max(axis=1, keepdims=True)
    return peak + np.log(np.exp(a - peak).sum(axis=1, keepdims=True))


def brute_force(scene: Scene, params: CrfParams, edges=None) -> ExactMarginals:
    """Exact marginals and log partition function by full enumeration."""
    n, c = scene.size, scene.class_count
    if c**n > MAX_ENUMERATION:
        raise ValueError(f"state space {c}^{n} exceeds enumeration limit {MAX_ENUMERATION}")
    if edges is None:
        edges = all_pairs(n)
    assign = np.indices((c,) * n).reshape(n, -1).T  # (c^n, n)
    score = params.theta_u * scene.unaries[np.arange(n), assign].sum(axis=1)
    for i, j in edges:
        score = score + params.theta_p * scene.cooc[assign[:, i], assign[:, j]]
    peak = score.max()
    weights = np.exp(score - peak)
    z = weights.sum()
    log_z = float(peak + np.log(z))
    probs = weights / z
    node = np.zeros((n, c))
    for i in range(n):
        np.add.at(node[i], assign[:, i], probs)
    pair = {}
    for i, j in edges:
        table = np.zeros((c, c))
        np.add.at(table, (assign[:, i], assign[:, j]), probs)
        pair[(i, j)] = table
    return ExactMarginals(node, pair, log_z)


def bethe_log_z(scene: Scene, params: CrfParams, beliefs: Beliefs, edges=None) -> float:
    """Bethe estimate of the log partition function (exact on trees);
    monitoring only, never used to drive training decisions."""
    n = scene.size
    if edges is None:
        edges = all_pairs(n)
    log_node_pot = params.theta_u * scene.unaries
    log_edge_pot = params.theta_p * scene.cooc.astype(np.float64)
    degree = np.zeros(n)
    for i, j in edges:
        degree[i] += 1
        degree[j] += 1

    b = beliefs.node
    energy = float(np.sum(b * log_node_pot))
    entropy = float(np.sum((degree - 1.0) * np.sum(_xlogx(b), axis=1)))
    for (i, j) in edges:
        t = beliefs.pair[(i, j)]
        energy += float(np.sum(t * log_edge_pot))
        entropy -= float(np.sum(_xlogx(t)))
    return energy + entropy


def _xlogx(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0, p * np.log(p), 0.0)


@dataclass
class NllGradResult:
    nll: float
    grad_u: float
    grad_p: float
    exact: bool
    converged_fraction: float


def nll_and_grad(
    scenes,
    params: CrfParams,
    inference: str = "lbp",
    cfg: LbpConfig = LbpConfig(),
    edges_per_scene=None,
) -> NllGradResult:
    """Mean negative log likelihood of the observed labels and its gradient.

    `exact` inference enumerates; `lbp` uses belief marginals for the
    gradient and the Bethe estimate for the (approximate) NLL value.
    Non-convergence shows up in converged_fraction, never as an exception.
    """
    scene_list = scenes.scenes if isinstance(scenes, SceneSet) else list(scenes)
    if not scene_list:
        raise ValueError("nll_and_grad needs at least one scene")
    if inference not in ("lbp", "exact"):
        raise ValueError(f"unknown inference mode {inference!r}")
    nll_total = gu_total = gp_total = 0.0
    converged = 0
    for si, scene in enumerate(scene_list):
        edges = all_pairs(scene.size) if edges_per_scene is None else edges_per_scene[si]
        f_u_obs, f_p_obs = _feature_values(scene, scene.labels, edges)
        if inference == "exact":
            marg = brute_force(scene, params, edges)
            node, pair, log_z = marg.node, marg.pair, marg.log_z
            converged += 1
        else:
            beliefs = lbp(scene, params, cfg, edges)
            node, pair = beliefs.node, beliefs.pair
            log_z = bethe_log_z(scene, params, beliefs, edges)
            converged += bool(beliefs.converged)
        e_f_u = float(np.sum(node * scene.unaries))
        e_f_p = float(sum(np.sum(pair[(i, j)] * scene.cooc) for i, j in edges))
        nll_total += -(params.theta_u * f_u_obs + params.theta_p * f_p_obs) + log_z
        gu_total += e_f_u - f_u_obs
        gp_total += e_f_p - f_p_obs
    k = len(scene_list)
    return NllGradResult(
        nll_total / k, gu_total / k, gp_total / k, inference == "exact", converged / k
    )


@dataclass
class CrfTrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 16
    max_iters: int = 30_000
    init: tuple = (1.0, 1.0)
    divergence_bound: float = 1e3
    lbp: LbpConfig = field(default_factory=LbpConfig)
    inference: str = "lbp"
    trace_every: int = 50
    stream: RngStream = field(default_factory=lambda: RngStream(0))


def train_crf(scene_set: SceneSet, cfg: CrfTrainConfig = CrfTrainConfig()):
    """Momentum SGD on mini-batches of scenes.

    Returns (params, trace) where trace rows are
    (iteration, nll_estimate, theta_u, theta_p).
    """
    scenes = scene_set.scenes if isinstance(scene_set, SceneSet) else list(scene_set)
    if not scenes:
        raise ValueError("train_crf needs training scenes")
    theta = np.asarray(cfg.init, dtype=np.float64)
    vel = np.zeros(2)
    trace = []
    order = np.arange(len(scenes))
    pos = len(scenes)  # force a shuffle on first use
    epoch = 0
    for it in range(cfg.max_iters):
        if pos >= order.size:
            order = cfg.stream.derive("epoch", epoch).generator().permutation(len(scenes))
            pos = 0
            epoch += 1
        batch = [scenes[i] for i in order[pos : pos + cfg.batch_size]]
        pos += cfg.batch_size
        result = nll_and_grad(batch, CrfParams(*theta), cfg.inference, cfg.lbp)
        vel = cfg.momentum * vel - cfg.learning_rate * np.array([result.grad_u, result.grad_p])
        theta = theta + vel
        if it % cfg.trace_every == 0 or it == cfg.max_iters - 1:
            trace.append((it, result.nll, float(theta[0]), float(theta[1])))
        if np.max(np.abs(theta)) > cfg.divergence_bound:
            raise CrfDivergenceError(
                f"CRF training diverged at iteration {it}: theta = {theta.tolist()}", trace
            )
    return CrfParams(float(theta[0]), float(theta[1])), trace


def smooth(scene: Scene, params: CrfParams, cfg: LbpConfig = LbpConfig(), edges=None):
    """Context-smoothed per-instance labels and distributions.

    Labels are per-node max-marginals (ties to the lowest index); the
    smoothed distributions are the node beliefs.
    """
    beliefs = lbp(scene, params, cfg, edges)
    return np.argmax(beliefs.node, axis=1), beliefs.node


# ---------------------------------------------------------------------------
# files


def save_crf(params: CrfParams, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"theta_u": params.theta_u, "theta_p": params.theta_p}, fh, sort_keys=True)
        fh.write("\n")


def load_crf(path) -> CrfParams:
    from .data import SchemaError

    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        return CrfParams(float(raw["theta_u"]), float(raw["theta_p"]))
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: missing CRF field {exc}") from exc


def save_trace(trace, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "nll_estimate", "theta_u", "theta_p"])
        for it, nll, tu, tp in trace:
            writer.writerow([it, repr(float(nll)), repr(float(tu)), repr(float(tp))])
