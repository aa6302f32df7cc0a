"""Command-line entry point wiring all modules into reproducible runs.

Every subcommand takes --config (JSON), --seed, --out, optional --set
KEY=VALUE overrides (dotted keys), and --workers. Outputs land under --out
together with a run manifest that echoes the full configuration, so any
run can be replayed bit-for-bit. Exit codes: 0 success, 2 config/schema
errors, 3 numerical failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import adapt as adaptmod
from . import crf as crfmod
from . import data as dio
from . import laplace as lap
from . import metrics as metricsmod
from . import mlp
from . import predictive as pred
from .data import SchemaError
from .numerics import NumericalError, RngStream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _set_by_path(cfg: dict, dotted: str, value):
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise SchemaError(f"override {dotted!r} descends into a non-object")
    node[keys[-1]] = value


def load_config(path, overrides) -> dict:
    cfg = {}
    if path is not None:
        raw = dio._load_json(path)
        if not isinstance(raw, dict):
            raise SchemaError(f"{path}: config must be a JSON object")
        cfg = raw
    for item in overrides or []:
        if "=" not in item:
            raise SchemaError(f"--set expects KEY=VALUE, got {item!r}")
        key, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        _set_by_path(cfg, key, value)
    return cfg


def write_manifest(out_dir: Path, command: str, cfg: dict, seed: int, artifacts, wall_time: float):
    manifest = {
        "command": command,
        "config": cfg,
        "seed": seed,
        "artifacts": sorted(str(a) for a in artifacts),
        "wall_time_s": wall_time,
        "version": __version__,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest-", text=True)
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, out_dir / "manifest.json")


def _train_config(raw: dict, stream: RngStream) -> mlp.TrainConfig:
    fields = dict(raw or {})
    if "hidden" in fields:
        fields["hidden"] = tuple(fields["hidden"])
    try:
        return mlp.TrainConfig(**fields, stream=stream)
    except TypeError as exc:
        raise SchemaError(f"bad training config: {exc}") from exc


def _lbp_config(raw: dict) -> crfmod.LbpConfig:
    try:
        return crfmod.LbpConfig(**(raw or {}))
    except TypeError as exc:
        raise SchemaError(f"bad LBP config: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands (each returns the list of artifact paths it wrote)


def cmd_gen_data(cfg: dict, seed: int, out: Path, workers: int):
    stream = RngStream(seed)
    kind = cfg.get("kind", "clusters")
    if kind == "clusters":
        data = dio.gen_clusters(
            int(cfg["classes"]),
            int(cfg["dim"]),
            int(cfg["per_class"]),
            float(cfg["separation"]),
            stream.derive("gen"),
        )
        if cfg.get("splits"):
            data = dio.assign_splits(data, dict(cfg["splits"]), stream.derive("split"))
        if cfg.get("shift"):
            spec = dio.ShiftSpec(
                np.asarray(cfg["shift"]["offset"], dtype=float),
                float(cfg["shift"].get("noise_scale", 1.0)),
            )
            data = dio.apply_shift(data, spec, stream.derive("shift"))
        path = out / "dataset.json"
        dio.save_dataset(data, path)
        return [path]
    if kind == "scenes":
        scenes = dio.gen_scenes(
            int(cfg["classes"]),
            [list(g) for g in cfg["groups"]],
            int(cfg["scenes"]),
            tuple(cfg["n_range"]),
            float(cfg["unary_noise"]),
            stream.derive("scenes"),
            include_diagonal=bool(cfg.get("include_diagonal", True)),
        )
        path = out / "scenes.json"
        dio.save_scenes(scenes, path)
        return [path]
    if kind == "feature-scenes":
        data = dio.load_dataset(cfg["dataset"])
        base = data.split(cfg["split"]) if cfg.get("split") else data
        scenes = dio.scenes_from_dataset(
            base,
            [list(g) for g in cfg["groups"]],
            int(cfg["scenes"]),
            tuple(cfg["n_range"]),
            stream.derive("feature-scenes"),
            include_diagonal=bool(cfg.get("include_diagonal", True)),
        )
        path = out / "scenes.json"
        dio.save_scenes(scenes, path)
        return [path]
    if kind == "cooc":
        m = dio.group_cooc(
            int(cfg["classes"]), list(cfg["group"]), bool(cfg.get("include_diagonal", True))
        )
        path = out / "cooc.csv"
        dio.save_cooc(m, path)
        return [path]
    raise SchemaError(f"unknown gen-data kind {kind!r}")


def cmd_train(cfg: dict, seed: int, out: Path, workers: int):
    data = dio.load_dataset(cfg["data"])
    tc = _train_config(cfg.get("train"), RngStream(seed))
    params = mlp.train(tc, data, variant=cfg.get("variant", "cdp"))
    path = out / "model.json"
    mlp.save_model(params, path)
    return [path]


def cmd_laplace_fit(cfg: dict, seed: int, out: Path, workers: int):
    params = mlp.load_model(cfg["model"])
    data = dio.load_dataset(cfg["data"])
    split = data.split(cfg.get("split", "train"))
    factors = lap.fit_kfac(params, split.features, split.labels)
    post = lap.build_posterior(
        factors, params, float(cfg.get("n_scale", 1.0)), float(cfg.get("tau", 15.0))
    )
    path = out / "posterior.json"
    lap.save_posterior(post, path)
    return [path]


def cmd_predict(cfg: dict, seed: int, out: Path, workers: int):
    sampler = cfg.get("sampler", "cdp-masks")
    if sampler == "laplace-weights":
        model = lap.load_posterior(cfg["posterior"])
    else:
        model = mlp.load_model(cfg["model"])
    data = dio.load_dataset(cfg["data"])
    split = data.split(cfg.get("split", "test")) if cfg.get("split") else data
    if len(split) == 0:
        raise SchemaError(f"no items in split {cfg.get('split')!r}")
    mc_samples = int(cfg.get("mc_samples", pred.DEFAULT_MC_SAMPLES))
    stream = RngStream(seed)

    def run_chunk(bounds):
        lo, hi = bounds
        return pred.predict_dataset(sampler, model, split.features[lo:hi], mc_samples, stream)

    n = len(split)
    if workers > 1 and n > 1:
        step = (n + workers - 1) // workers
        chunks = [(lo, min(lo + step, n)) for lo in range(0, n, step)]
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run_chunk, chunks))
        results = [r for part in parts for r in part]
    else:
        results = run_chunk((0, n))
    labels = None if cfg.get("unlabeled") else split.labels
    predictions = pred.as_predictions(results, labels)
    path = out / "predictions.json"
    pred.save_predictions(predictions, path)
    return [path]


def cmd_eval(cfg: dict, seed: int, out: Path, workers: int):
    test_preds = pred.load_predictions(cfg["predictions"])
    ood_preds = pred.load_predictions(cfg["ood_predictions"]) if cfg.get("ood_predictions") else None
    mcfg = metricsmod.MetricsConfig(
        int(cfg.get("bins", 15)),
        cfg.get("measure", "confidence"),
        cfg.get("include_ood"),
    )
    report = metricsmod.evaluate(test_preds, ood_preds, mcfg)
    report_path = out / "report.json"
    hist_path = out / "histogram.csv"
    metricsmod.save_report(report, report_path)
    metricsmod.save_histogram_csv(report, hist_path)
    return [report_path, hist_path]


def cmd_train_crf(cfg: dict, seed: int, out: Path, workers: int):
    scenes = dio.load_scenes(cfg["scenes"])
    raw = dict(cfg.get("crf") or {})
    raw["lbp"] = _lbp_config(cfg.get("lbp"))
    try:
        tc = crfmod.CrfTrainConfig(**raw, stream=RngStream(seed))
    except TypeError as exc:
        raise SchemaError(f"bad CRF training config: {exc}") from exc
    params, trace = crfmod.train_crf(scenes, tc)
    crf_path = out / "crf.json"
    trace_path = out / "trace.csv"
    crfmod.save_crf(params, crf_path)
    crfmod.save_trace(trace, trace_path)
    return [crf_path, trace_path]


def cmd_smooth(cfg: dict, seed: int, out: Path, workers: int):
    scenes = dio.load_scenes(cfg["scenes"])
    params = crfmod.load_crf(cfg["crf"])
    lbp_cfg = _lbp_config(cfg.get("lbp"))
    entries = []
    unary_hits = smoothed_hits = total = 0
    for scene in scenes.scenes:
        labels, smoothed = crfmod.smooth(scene, params, lbp_cfg)
        entries.append({"labels": [int(v) for v in labels], "smoothed": smoothed.tolist()})
        unary_hits += int(np.sum(np.argmax(scene.unaries, axis=1) == scene.labels))
        smoothed_hits += int(np.sum(labels == scene.labels))
        total += scene.size
    payload = {
        "scenes": entries,
        "unary_accuracy": unary_hits / total,
        "smoothed_accuracy": smoothed_hits / total,
    }
    path = out / "smoothed.json"
    dio._dump_json(payload, path)
    return [path]


def cmd_adapt(cfg: dict, seed: int, out: Path, workers: int):
    source = dio.load_dataset(cfg["source"])
    target = dio.load_dataset(cfg["target"])
    scenes = dio.load_scenes(cfg["scenes"]) if cfg.get("scenes") else None
    stream = RngStream(seed)
    fields = dict(cfg.get("adapt") or {})
    fields["base_train"] = _train_config(cfg.get("train"), stream.derive("unused"))
    fields["fine_tune"] = dict(cfg.get("fine_tune") or {})
    if "conditions" in fields:
        fields["conditions"] = tuple(fields["conditions"])
    if cfg.get("crf"):
        raw = dict(cfg["crf"])
        raw["lbp"] = _lbp_config(cfg.get("lbp"))
        fields["crf_train"] = crfmod.CrfTrainConfig(**raw)
    try:
        acfg = adaptmod.AdaptConfig(**fields, stream=stream)
    except TypeError as exc:
        raise SchemaError(f"bad adaptation config: {exc}") from exc
    report = adaptmod.run_adaptation(acfg, source, target, scenes=scenes, out_dir=out)
    return [out / "adapt_report.json", out / "threshold.json", out / "auto_set.json", out / "manual_set.json"]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "laplace-fit": cmd_laplace_fit,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "train-crf": cmd_train_crf,
    "smooth": cmd_smooth,
    "adapt": cmd_adapt,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnnkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override (dotted keys; value parsed as JSON)")
        p.add_argument("--workers", type=int, default=1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.time()
    try:
        cfg = load_config(args.config, args.set)
        args.out.mkdir(parents=True, exist_ok=True)
        artifacts = COMMANDS[args.command](cfg, args.seed, args.out, max(1, args.workers))
    except (NumericalError, crfmod.CrfDivergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (SchemaError, KeyError, ValueError, FileNotFoundError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    write_manifest(
        args.out,
        args.command,
        cfg,
        args.seed,
        [p.relative_to(args.out) for p in artifacts],
        time.time() - started,
    )
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
