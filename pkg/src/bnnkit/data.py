"""Synthetic datasets, scene generation, domain-shift simulation, and file formats.

Datasets are class-conditional Gaussian clusters whose means sit on the
vertices of a regular simplex; scenes are groups of object instances with
simplex-valued unary distributions and a per-scene binary co-occurrence
matrix. Everything is a pure function of its configuration and RngStream.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import RngStream

SPLIT_TAGS = ("train", "validation", "calibration", "pool", "test")


class SchemaError(ValueError):
    """A file violated its schema; message names the path and field."""


# ---------------------------------------------------------------------------
# types


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    class_count: int
    splits: np.ndarray  # (n,) unicode split tags

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits)
        validate_dataset(self)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.labels[idx], self.class_count, self.splits[idx])

    def split(self, tag: str) -> "Dataset":
        return self.subset(self.indices(tag))


@dataclass
class Scene:
    unaries: np.ndarray  # (n, C), rows on the simplex
    labels: np.ndarray  # (n,) int64
    cooc: np.ndarray  # (C, C) binary symmetric
    features: np.ndarray | None = None  # (n, d), only on the end-to-end path

    def __post_init__(self):
        self.unaries = normalize_unaries(self.unaries)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.cooc = np.asarray(self.cooc, dtype=np.int64)
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)

    @property
    def size(self) -> int:
        return self.unaries.shape[0]

    @property
    def class_count(self) -> int:
        return self.unaries.shape[1]


@dataclass
class SceneSet:
    scenes: list[Scene]
    class_count: int

    def __len__(self) -> int:
        return len(self.scenes)


@dataclass(frozen=True)
class ShiftSpec:
    mean_offset: np.ndarray  # (d,)
    noise_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mean_offset", np.asarray(self.mean_offset, dtype=np.float64))
        if not np.all(np.isfinite(self.mean_offset)) or not np.isfinite(self.noise_scale):
            raise ValueError("shift spec must be finite")
        if self.noise_scale <= 0:
            raise ValueError(f"noise_scale must be > 0, got {self.noise_scale}")


# ---------------------------------------------------------------------------
# validation helpers


def validate_dataset(data: Dataset) -> None:
    n = data.features.shape[0]
    if data.features.ndim != 2:
        raise SchemaError("features must be a 2-d array")
    if data.labels.shape != (n,) or data.splits.shape != (n,):
        raise SchemaError("features, labels, and splits must have matching length")
    if not np.all(np.isfinite(data.features)):
        raise SchemaError("features contain non-finite values")
    if n and (data.labels.min() < 0 or data.labels.max() >= data.class_count):
        bad = int(np.flatnonzero((data.labels < 0) | (data.labels >= data.class_count))[0])
        raise SchemaError(f"item {bad}: label {data.labels[bad]} outside [0, {data.class_count})")
    for tag in np.unique(data.splits):
        if tag not in SPLIT_TAGS:
            raise SchemaError(f"unknown split tag {tag!r}")


def normalize_unaries(unaries, tol: float = 1e-9) -> np.ndarray:
    """Project near-simplex rows exactly onto the simplex. Idempotent."""
    u = np.asarray(unaries, dtype=np.float64)
    if u.ndim != 2:
        raise SchemaError("unaries must be a 2-d array")
    if np.any(u < 0) or not np.all(np.isfinite(u)):
        raise SchemaError("unaries must be finite and non-negative")
    sums = u.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > tol):
        bad = int(np.flatnonzero(np.abs(sums - 1.0) > tol)[0])
        raise SchemaError(f"unary row {bad} sums to {sums[bad]!r}, not 1")
    return u / sums[:, None]


def validate_cooc(m: np.ndarray, class_count: int) -> np.ndarray:
    m = np.asarray(m)
    if m.shape != (class_count, class_count):
        raise SchemaError(f"co-occurrence matrix must be {class_count}x{class_count}, got {m.shape}")
    if not np.all(np.isin(m, (0, 1))):
        raise SchemaError("co-occurrence matrix entries must be 0 or 1")
    if np.any(m != m.T):
        raise SchemaError("co-occurrence matrix must be symmetric")
    return m.astype(np.int64)


# ---------------------------------------------------------------------------
# generators


def simplex_means(class_count: int, dim: int, separation: float) -> np.ndarray:
    """Vertices of a regular simplex centered at the origin, pairwise
    distance `separation`, embedded in the first class_count-1 coordinates."""
    if dim < class_count - 1:
        raise ValueError(f"dim {dim} too small for a {class_count}-vertex simplex")
    # center the standard-basis simplex, then rotate its (C-1)-dim span onto
    # the leading coordinates via QR of the centering projector
    v = np.eye(class_count) - 1.0 / class_count
    q, _ = np.linalg.qr(v[:, : class_count - 1])
    low = v @ q  # (C, C-1), pairwise distance sqrt(2)
    means = np.zeros((class_count, dim))
    means[:, : class_count - 1] = low * (separation / np.sqrt(2.0))
    return means


def gen_clusters(
    class_count: int,
    dim: int,
    per_class: int,
    separation: float,
    stream: RngStream,
) -> Dataset:
    """Balanced class-conditional unit-covariance Gaussian clusters."""
    if class_count < 2 or dim < 2 or per_class < 10:
        raise ValueError("need class_count >= 2, dim >= 2, per_class >= 10")
    means = simplex_means(class_count, dim, separation)
    labels = np.repeat(np.arange(class_count), per_class)
    noise = stream.derive("cluster-noise").generator().standard_normal((labels.size, dim))
    features = means[labels] + noise
    splits = np.full(labels.size, "train")
    return Dataset(features, labels, class_count, splits)


def assign_splits(data: Dataset, fractions: dict[str, float], stream: RngStream) -> Dataset:
    """Stratified (per-class) random split assignment; fractions must sum to 1."""
    if abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    for tag in fractions:
        if tag not in SPLIT_TAGS:
            raise ValueError(f"unknown split tag {tag!r}")
    tags = list(fractions)
    splits = np.empty(len(data), dtype=object)
    gen = stream.derive("splits").generator()
    for c in range(data.class_count):
        idx = np.flatnonzero(data.labels == c)
        idx = idx[gen.permutation(idx.size)]
        bounds = np.floor(np.cumsum([fractions[t] for t in tags]) * idx.size).astype(int)
        bounds[-1] = idx.size
        start = 0
        for tag, stop in zip(tags, bounds):
            splits[idx[start:stop]] = tag
            start = stop
    return Dataset(data.features, data.labels, data.class_count, splits.astype(str))


def apply_shift(data: Dataset, shift: ShiftSpec, stream: RngStream) -> Dataset:
    """Translate class means by `mean_offset` and redraw the class-conditional
    noise at `noise_scale`. Labels and split tags are untouched."""
    if shift.mean_offset.shape != (data.dim,):
        raise ValueError(
            f"offset dimension {shift.mean_offset.shape[0]} != feature dimension {data.dim}"
        )
    means = np.zeros((data.class_count, data.dim))
    for c in range(data.class_count):
        idx = data.labels == c
        if np.any(idx):
            means[c] = data.features[idx].mean(axis=0)
    noise = stream.derive("shift-noise").generator().standard_normal(data.features.shape)
    features = means[data.labels] + shift.mean_offset + shift.noise_scale * noise
    return Dataset(features, data.labels.copy(), data.class_count, data.splits.copy())


def group_cooc(class_count: int, group, include_diagonal: bool = True) -> np.ndarray:
    group = np.asarray(sorted(group), dtype=np.int64)
    m = np.zeros((class_count, class_count), dtype=np.int64)
    m[np.ix_(group, group)] = 1
    if not include_diagonal:
        m[group, group] = 0
    return m


def gen_scenes(
    class_count: int,
    groups: list,
    scene_count: int,
    n_range: tuple[int, int],
    unary_noise: float,
    stream: RngStream,
    include_diagonal: bool = True,
) -> SceneSet:
    """Scenes whose labels come from one class group each; unaries are the
    softmax of one-hot logits corrupted by Gaussian noise of scale unary_noise."""
    groups = [np.asarray(sorted(g), dtype=np.int64) for g in groups]
    for g in groups:
        if g.size == 0:
            raise ValueError("empty class group")
        if g.min() < 0 or g.max() >= class_count:
            raise ValueError(f"group {g.tolist()} outside [0, {class_count})")
    lo, hi = n_range
    if not (1 <= lo <= hi):
        raise ValueError(f"invalid instance count range {n_range}")
    scenes = []
    for s in range(scene_count):
        gen = stream.derive("scene", s).generator()
        group = groups[gen.integers(len(groups))]
        n = int(gen.integers(lo, hi + 1))
        labels = group[gen.integers(group.size, size=n)]
        logits = np.eye(class_count)[labels] + unary_noise * gen.standard_normal((n, class_count))
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        unaries = e / e.sum(axis=1, keepdims=True)
        scenes.append(Scene(unaries, labels, group_cooc(class_count, group, include_diagonal)))
    return SceneSet(scenes, class_count)


def scenes_from_dataset(
    data: Dataset,
    groups: list,
    scene_count: int,
    n_range: tuple[int, int],
    stream: RngStream,
    include_diagonal: bool = True,
) -> SceneSet:
    """Scenes built from real items: each scene samples dataset items whose
    label lies in one group, carrying features for the end-to-end path.
    Unaries start uniform and are filled in later from model predictions."""
    groups = [np.asarray(sorted(g), dtype=np.int64) for g in groups]
    by_group = []
    for g in groups:
        idx = np.flatnonzero(np.isin(data.labels, g))
        if idx.size == 0:
            raise ValueError(f"no dataset items with labels in group {g.tolist()}")
        by_group.append(idx)
    lo, hi = n_range
    c = data.class_count
    scenes = []
    for s in range(scene_count):
        gen = stream.derive("feature-scene", s).generator()
        gi = int(gen.integers(len(groups)))
        pool = by_group[gi]
        n = int(gen.integers(lo, hi + 1))
        take = pool[gen.integers(pool.size, size=n)]
        scenes.append(
            Scene(
                np.full((n, c), 1.0 / c),
                data.labels[take],
                group_cooc(c, groups[gi], include_diagonal),
                features=data.features[take],
            )
        )
    return SceneSet(scenes, c)


def with_unaries(scene: Scene, unaries: np.ndarray) -> Scene:
    return replace(scene, unaries=normalize_unaries(unaries))


# ---------------------------------------------------------------------------
# file formats


def _dump_json(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc


def save_dataset(data: Dataset, path) -> None:
    items = [
        {"x": row.tolist(), "y": int(y), "split": str(tag)}
        for row, y, tag in zip(data.features, data.labels, data.splits)
    ]
    _dump_json({"c": data.class_count, "d": data.dim, "items": items}, path)


def load_dataset(path) -> Dataset:
    raw = _load_json(path)
    try:
        c, d, items = int(raw["c"]), int(raw["d"]), raw["items"]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: missing dataset field {exc}") from exc
    feats, labels, splits = [], [], []
    for i, item in enumerate(items):
        try:
            x, y, tag = item["x"], item["y"], item["split"]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"{path}: item {i} missing field {exc}") from exc
        if len(x) != d:
            raise SchemaError(f"{path}: item {i} field 'x' has length {len(x)}, expected {d}")
        feats.append(x)
        labels.append(y)
        splits.append(tag)
    try:
        return Dataset(
            np.asarray(feats, dtype=np.float64).reshape(len(items), d),
            labels,
            c,
            np.asarray(splits),
        )
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def save_scenes(scenes: SceneSet, path) -> None:
    payload = {"c": scenes.class_count, "scenes": []}
    for scene in scenes.scenes:
        entry = {
            "m": scene.cooc.tolist(),
            "instances": [
                {"unary": u.tolist(), "y": int(y)} for u, y in zip(scene.unaries, scene.labels)
            ],
        }
        if scene.features is not None:
            for inst, x in zip(entry["instances"], scene.features):
                inst["x"] = x.tolist()
        payload["scenes"].append(entry)
    _dump_json(payload, path)


def load_scenes(path) -> SceneSet:
    raw = _load_json(path)
    try:
        c, entries = int(raw["c"]), raw["scenes"]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: missing scene-set field {exc}") from exc
    scenes = []
    for i, entry in enumerate(entries):
        try:
            m = validate_cooc(np.asarray(entry["m"]), c)
            unaries = [inst["unary"] for inst in entry["instances"]]
            labels = [inst["y"] for inst in entry["instances"]]
            feats = [inst.get("x") for inst in entry["instances"]]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"{path}: scene {i} missing field {exc}") from exc
        except SchemaError as exc:
            raise SchemaError(f"{path}: scene {i}: {exc}") from exc
        if any(y < 0 or y >= c for y in labels):
            raise SchemaError(f"{path}: scene {i} has a label outside [0, {c})")
        features = None
        if all(f is not None for f in feats) and feats:
            features = np.asarray(feats, dtype=np.float64)
        try:
            scenes.append(Scene(np.asarray(unaries, dtype=np.float64), labels, m, features))
        except SchemaError as exc:
            raise SchemaError(f"{path}: scene {i}: {exc}") from exc
    return SceneSet(scenes, c)


def save_cooc(m: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(m, dtype=np.int64):
            writer.writerow(row.tolist())


def load_cooc(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [[cell for cell in row] for row in csv.reader(fh) if row]
    if not rows:
        raise SchemaError(f"{path}: empty co-occurrence file")
    try:
        m = np.asarray([[int(cell) for cell in row] for row in rows])
    except ValueError as exc:
        raise SchemaError(f"{path}: non-integer entry ({exc})") from exc
    try:
        return validate_cooc(m, m.shape[0] if m.ndim == 2 else -1)
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
