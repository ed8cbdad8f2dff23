"""Experiment configuration and the on-disk prepared-dataset format.

A prepared directory holds::

    records.csv       stream_id, timestamp (POSIX seconds), label, classify, external_* columns
    embeddings.sgem   full embeddings (SGEM v2, float64)
    reduced.sgem      in-path linguistic channels
    features.sgem     derived time features, one column per entry of features.json
    features.json     reduction, feature metadata and external-column flags
    splits.json       the split plan
    manifest.json     counts, config echo and sha256 of every file above
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, LoadError
from .models import ModelConfig
from .prep.data import FeatureInfo, StreamDataset, load_dataset, read_matrix, write_matrix
from .prep.features import REDUCTIONS, STANDARDIZATIONS, TIME_FEATURES, derive_time_features, reduce_dims
from .prep.splits import SplitPlan, make_splits
from .train import GridSpec, TrainSpec, apply_point

PREPARED_FILES = ("records.csv", "embeddings.sgem", "reduced.sgem", "features.sgem", "features.json", "splits.json")
_TOP_KEYS = {"data", "reduction", "features", "external", "split", "model", "grid", "train", "event_classes", "class_names", "output_dir"}


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path
    metadata: Path | None
    embeddings: Path | None
    num_classes: int | None
    reduction: dict
    features: dict
    external: dict
    split: dict
    model: ModelConfig | None
    grid: GridSpec | None
    train: TrainSpec
    event_classes: tuple[int, ...]
    class_names: tuple[str, ...] | None
    output_dir: Path = field(default=Path("out"))

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "ExperimentConfig":
        """Parse and validate every section before any data is touched."""
        if not isinstance(raw, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = set(raw) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        base = Path(base_dir)
        data = raw.get("data", {})
        resolve = lambda p: None if p is None else (base / p if not Path(p).is_absolute() else Path(p))  # noqa: E731

        red = dict(raw.get("reduction", {"method": "none"}))
        if red.get("method", "none") not in REDUCTIONS:
            raise ConfigError(f"reduction method must be one of {REDUCTIONS}, got {red.get('method')!r}")
        feats = dict(raw.get("features", {}))
        for name, opts in feats.items():
            if name not in TIME_FEATURES:
                raise ConfigError(f"unknown time feature {name!r}; choose from {TIME_FEATURES}")
            method = opts if isinstance(opts, str) else opts.get("standardize", "none")
            if method not in STANDARDIZATIONS:
                raise ConfigError(f"{name}: standardisation must be one of {STANDARDIZATIONS}, got {method!r}")
        split = dict(raw.get("split", {"mode": "kfold", "folds": 5, "seed": 0}))
        if split.get("mode", "kfold") not in ("kfold", "single", "predefined"):
            raise ConfigError(f"unknown split mode {split.get('mode')!r}")

        train = TrainSpec.from_dict(raw.get("train", {}))
        model = ModelConfig.from_dict(raw["model"]) if raw.get("model") is not None else None
        grid = GridSpec(dict(raw["grid"])) if raw.get("grid") else None
        if grid is not None:
            if model is None:
                raise ConfigError("a grid needs a base model config")
            for point in grid.points():
                try:
                    apply_point(model, train, point)
                except ConfigError:
                    pass  # infeasible points are reported per point at tune time
                except (KeyError, TypeError) as exc:
                    raise ConfigError(f"grid point {point}: {exc}") from None
        names = raw.get("class_names")
        return cls(
            raw=copy.deepcopy(raw),
            base_dir=base,
            metadata=resolve(data.get("metadata")),
            embeddings=resolve(data.get("embeddings")),
            num_classes=data.get("num_classes"),
            reduction=red,
            features=feats,
            external=dict(raw.get("external", {})),
            split=split,
            model=model,
            grid=grid,
            train=train,
            event_classes=tuple(int(c) for c in raw.get("event_classes", [])),
            class_names=None if names is None else tuple(str(n) for n in names),
            output_dir=resolve(raw.get("output_dir", "out")),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise LoadError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(raw, path.parent)

    @property
    def prepared_dir(self) -> Path:
        return self.output_dir / "prepared"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def build_dataset(cfg: ExperimentConfig) -> tuple[StreamDataset, SplitPlan]:
    if cfg.metadata is None or cfg.embeddings is None:
        raise ConfigError("config needs data.metadata and data.embeddings")
    ds = load_dataset(cfg.metadata, cfg.embeddings, cfg.num_classes)
    ds = ds.replace(
        external_in_path=bool(cfg.external.get("in_path", False)),
        external_in_input=bool(cfg.external.get("in_input", True)),
    )
    red = cfg.reduction
    ds = reduce_dims(ds, red.get("method", "none"), red.get("dims"), int(red.get("seed", 0)))
    if cfg.features:
        ds = derive_time_features(ds, cfg.features)
    split = dict(cfg.split)
    mode = split.pop("mode", "kfold")
    if "fractions" in split:
        split["fractions"] = tuple(split["fractions"])
    plan = make_splits(ds, mode, **split)
    return ds, plan


def write_prepared(ds: StreamDataset, plan: SplitPlan, out_dir, config_echo: dict | None = None, model: ModelConfig | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext_names = list(ds.external_names)
    with open(out / "records.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["stream_id", "timestamp", "label", "classify", *ext_names])
        for i in range(len(ds)):
            ts = "" if ds.timestamps is None or np.isnan(ds.timestamps[i]) else repr(float(ds.timestamps[i]))
            label = "" if ds.labels[i] < 0 else str(int(ds.labels[i]))
            ext = [repr(float(v)) for v in ds.external[i]] if ds.external is not None else []
            writer.writerow([ds.stream_ids[i], ts, label, int(ds.classify[i]), *ext])
    write_matrix(out / "embeddings.sgem", ds.embeddings, version=2)
    write_matrix(out / "reduced.sgem", ds.path_embeddings, version=2)
    names = [f.name for f in ds.feature_info]
    feats = np.stack([ds.features[n] for n in names], axis=1) if names else np.zeros((len(ds), 0))
    write_matrix(out / "features.sgem", feats, version=2)
    meta = {
        "num_classes": ds.num_classes,
        "reduction": ds.reduction,
        "features": [f.__dict__ for f in ds.feature_info],
        "external_names": ext_names,
        "external_in_path": ds.external_in_path,
        "external_in_input": ds.external_in_input,
    }
    (out / "features.json").write_text(_dump(meta), encoding="utf-8")
    (out / "splits.json").write_text(plan.to_json() + "\n", encoding="utf-8")
    sizes = [sl.stop - sl.start for sl in ds.stream_slices().values()]
    manifest = {
        "num_records": len(ds),
        "num_streams": len(sizes),
        "records_per_stream": dict(zip(ds.streams(), sizes)),
        "num_classes": ds.num_classes,
        "embedding_dim": ds.embedding_dim,
        "path_channels": int(ds.path_features().shape[1]),
        "folds": len(plan),
        "files": {name: sha256_file(out / name) for name in PREPARED_FILES},
        "config": config_echo,
    }
    if model is not None:
        manifest["history"] = {
            "mode": model.input_mode,
            "w": model.w,
            "k": model.k if model.input_mode == "unit" else model.w,
            "n": model.n if model.input_mode == "unit" else 1,
            "history_length": model.k * model.n + (model.w - model.k) if model.input_mode == "unit" else model.w,
        }
    (out / "manifest.json").write_text(_dump(manifest), encoding="utf-8")
    return manifest


def load_prepared(prepared_dir) -> tuple[StreamDataset, SplitPlan, dict]:
    d = Path(prepared_dir)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
        meta = json.loads((d / "features.json").read_text(encoding="utf-8"))
        plan = SplitPlan.from_dict(json.loads((d / "splits.json").read_text(encoding="utf-8")))
    except OSError as exc:
        raise LoadError(f"prepared dataset {d} is incomplete ({exc.filename}: {exc.strerror}); run `prepare` first") from None
    for name, digest in manifest["files"].items():
        if sha256_file(d / name) != digest:
            raise LoadError(f"{d / name} does not match its manifest hash")
    with open(d / "records.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    n = len(rows)
    ext_names = tuple(meta["external_names"])
    ids = np.array([r["stream_id"] for r in rows], dtype=object)
    ts = np.array([float(r["timestamp"]) if r["timestamp"] else np.nan for r in rows]) if n else np.zeros(0)
    labels = np.array([int(r["label"]) if r["label"] else -1 for r in rows], dtype=np.int64)
    classify = np.array([r["classify"] == "1" for r in rows], dtype=bool)
    ext = np.array([[float(r[c]) for c in ext_names] for r in rows]) if ext_names else None
    feats = read_matrix(d / "features.sgem")
    infos = tuple(FeatureInfo(**f) for f in meta["features"])
    ds = StreamDataset(
        stream_ids=ids,
        timestamps=None if np.isnan(ts).all() else ts,
        labels=labels,
        embeddings=read_matrix(d / "embeddings.sgem"),
        classify=classify,
        num_classes=int(meta["num_classes"]),
        external=ext,
        external_names=ext_names,
        external_in_path=bool(meta["external_in_path"]),
        external_in_input=bool(meta["external_in_input"]),
        reduced=read_matrix(d / "reduced.sgem"),
        reduction=meta["reduction"],
        features={f.name: feats[:, i] for i, f in enumerate(infos)},
        feature_info=infos,
    )
    return ds, plan, manifest
