"""``sigstream`` command line: prepare, stats, train, tune, eval.

Exit codes: 0 success, 1 validation failure, 2 I/O failure, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, LoadError, SigStreamError
from .experiment import ExperimentConfig, build_dataset, load_prepared, write_prepared
from .models import InputDims, ModelConfig, batch_for, build_model
from .prep.stats import dataset_stats
from .train import TrainReport, evaluate, grid_search, result_row, run_experiment, summary_table, write_jsonl

log = logging.getLogger("sigstream")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.out:
        cfg.output_dir = Path(args.out)
    if args.seed_list:
        try:
            seeds = tuple(int(s) for s in args.seed_list.split(",") if s.strip())
        except ValueError:
            raise ConfigError(f"--seed-list must be comma-separated integers, got {args.seed_list!r}") from None
        cfg.train = replace(cfg.train, seeds=seeds)
    return cfg


def _emit(args, payload: dict, table: str) -> None:
    sys.stdout.write(_dump(payload) if args.format == "json" else table + "\n")


def _stats_table(report) -> str:
    lines = []
    width = max(len(name) for name, _ in report.rows())
    for name, cells in report.rows():
        lines.append(f"{name.ljust(width)}  " + "  ".join(cells))
    lines.extend(f"warning: {w}" for w in report.warnings)
    return "\n".join(lines)


def cmd_prepare(cfg: ExperimentConfig, args) -> dict:
    ds, plan = build_dataset(cfg)
    manifest = write_prepared(ds, plan, cfg.prepared_dir, cfg.raw, cfg.model)
    table = "\n".join(
        [f"prepared   {cfg.prepared_dir}", f"records    {manifest['num_records']}", f"streams    {manifest['num_streams']}", f"folds      {manifest['folds']}"]
        + ([f"history    {manifest['history']['history_length']} points"] if "history" in manifest else [])
    )
    _emit(args, manifest, table)
    return manifest


def cmd_stats(cfg: ExperimentConfig, args) -> dict:
    ds, _, _ = load_prepared(cfg.prepared_dir)
    report = dataset_stats(ds, cfg.event_classes)
    out = cfg.output_dir / "stats.json"
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    _emit(args, report.to_dict(), _stats_table(report))
    return report.to_dict()


def _save_model(cfg: ModelConfig, dims: InputDims, report: TrainReport, out_dir: Path) -> None:
    model = build_model(replace(cfg, seed=report.seed), dims)
    model.load_state_dict(report.state)
    out_dir.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(model, out_dir / "model.sgem")
    meta = {"model": model.cfg.to_dict(), "dims": dims.__dict__, "fold": report.fold, "seed": report.seed}
    (out_dir / "model.json").write_text(_dump(meta), encoding="utf-8")


def _pick_best(reports: list[TrainReport]) -> TrainReport:
    return max(enumerate(reports), key=lambda ir: (ir[1].val.macro_f1, -ir[0]))[1]


def _class_names(cfg: ExperimentConfig, k: int):
    return cfg.class_names if cfg.class_names and len(cfg.class_names) == k else None


def cmd_train(cfg: ExperimentConfig, args) -> dict:
    if cfg.model is None:
        raise ConfigError("train needs a `model` section")
    ds, plan, _ = load_prepared(cfg.prepared_dir)
    model_cfg = cfg.model
    if model_cfg.head.num_classes != ds.num_classes:
        raise ConfigError(f"model has {model_cfg.head.num_classes} classes, data has {ds.num_classes}")
    started = time.time()
    batch = batch_for(model_cfg, ds)
    reports = run_experiment(model_cfg, ds, plan, cfg.train, jobs=args.jobs, batch=batch)
    rows = [result_row(r) for r in reports]
    out = cfg.output_dir / "train"
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(rows, out / "results.jsonl")
    table = summary_table(rows, ds.num_classes, _class_names(cfg, ds.num_classes))
    (out / "summary.txt").write_text(table + "\n", encoding="utf-8")
    results = {
        "command": "train",
        "config": cfg.raw,
        "runs": [{k: v for k, v in r.to_dict().items() if k != "timestamp"} for r in reports],
        "mean_test_macro_f1": _mean([r.get("test_macro_f1") for r in rows]),
        "mean_val_macro_f1": _mean([r["val_macro_f1"] for r in rows]),
        "timestamp": {"started": started, "wall_clock_seconds": time.time() - started, "runs": [r.wall_clock for r in reports]},
    }
    (out / "results.json").write_text(_dump(results), encoding="utf-8")
    _save_model(model_cfg, InputDims.from_batch(batch), _pick_best(reports), out / "best")
    _emit(args, {k: v for k, v in results.items() if k != "runs"}, table)
    return results


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def cmd_tune(cfg: ExperimentConfig, args) -> dict:
    if cfg.model is None or cfg.grid is None:
        raise ConfigError("tune needs `model` and `grid` sections")
    ds, plan, _ = load_prepared(cfg.prepared_dir)
    started = time.time()
    result = grid_search(cfg.model, cfg.grid, ds, plan, cfg.train, jobs=args.jobs)
    out = cfg.output_dir / "tune"
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(result.rows, out / "results.jsonl")
    table = summary_table(result.rows, ds.num_classes, _class_names(cfg, ds.num_classes))
    (out / "summary.txt").write_text(table + "\n", encoding="utf-8")
    summary = {"command": "tune", "config": cfg.raw, **result.summary(), "timestamp": {"started": started, "wall_clock_seconds": time.time() - started}}
    (out / "results.json").write_text(_dump(summary), encoding="utf-8")
    best_reports = [r for r, row in zip(result.reports, result.rows) if row["point_index"] == result.best_index]
    batch = batch_for(result.best_config, ds)
    _save_model(result.best_config, InputDims.from_batch(batch), _pick_best(best_reports), out / "best")
    for skip in result.skipped:
        log.warning("grid point %s skipped: %s", skip["point_index"], skip["reason"])
    _emit(args, {k: v for k, v in summary.items() if k != "config"}, table)
    return summary


def cmd_eval(cfg: ExperimentConfig, args) -> dict:
    ckpt_dir = cfg.output_dir / ("tune" if args.from_tune else "train") / "best"
    try:
        meta = json.loads((ckpt_dir / "model.json").read_text(encoding="utf-8"))
    except OSError:
        raise LoadError(f"no checkpoint at {ckpt_dir}; run train or tune first") from None
    ds, plan, _ = load_prepared(cfg.prepared_dir)
    model_cfg = ModelConfig.from_dict(meta["model"])
    batch = batch_for(model_cfg, ds)
    model = build_model(model_cfg, InputDims(**meta["dims"]))
    nn.load_checkpoint(model, ckpt_dir / "model.sgem")
    fold = meta["fold"] if args.fold is None else args.fold
    idx = plan.sample_indices(batch.index, fold).test
    idx = idx[batch.labels[idx] >= 0]
    if idx.size == 0:
        raise ConfigError(f"fold {fold} has no labelled test records")
    metrics = evaluate(model, batch.select(idx))
    payload = {"command": "eval", "fold": fold, "checkpoint": str(ckpt_dir), "test": metrics.to_dict()}
    (cfg.output_dir / "eval.json").write_text(_dump(payload), encoding="utf-8")
    row = {"point_index": 0, "config_hash": model_cfg.config_hash(), "test_f1": list(metrics.f1), "test_macro_f1": metrics.macro_f1}
    _emit(args, payload, summary_table([row], ds.num_classes, _class_names(cfg, ds.num_classes)))
    return payload


COMMANDS = {"prepare": cmd_prepare, "stats": cmd_stats, "train": cmd_train, "tune": cmd_tune, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sigstream", description="Signature-based longitudinal stream classification.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", help="output directory (overrides output_dir in the config)")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        p.add_argument("--seed-list", help="comma-separated seeds, e.g. 1,12,123")
        p.add_argument("--format", choices=("table", "json"), default="table")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            p.add_argument("--fold", type=int, help="fold whose test set to score (default: the checkpoint's fold)")
            p.add_argument("--from-tune", action="store_true", help="score the tune checkpoint instead of the train one")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
        cfg = _load_config(args)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args)
    except SigStreamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
