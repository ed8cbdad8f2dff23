"""Training loop, early stopping, metrics and grid search."""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigError, ContractError, DivergenceError, DomainError, SigStreamError
from .models import InputDims, ModelConfig, StreamModel, batch_for, build_model
from .prep.data import StreamDataset
from .prep.history import HistoryBatch
from .prep.splits import SplitPlan

PAPER_SEEDS = (1, 12, 123)
EVAL_BATCH = 512


@dataclass(frozen=True)
class TrainSpec:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    decoupled_weight_decay: bool = False
    max_epochs: int = 100
    batch_size: int = 64
    patience: int = 3
    loss: str = "focal"
    gamma: float = 2.0
    seeds: tuple[int, ...] = PAPER_SEEDS

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("patience, batch_size and max_epochs must all be >= 1")
        if self.loss not in ("focal", "cross_entropy"):
            raise ConfigError(f"loss must be 'focal' or 'cross_entropy', got {self.loss!r}")
        if not self.seeds:
            raise ConfigError("need at least one seed")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train fields: {sorted(unknown)}")
        if "seeds" in d:
            d["seeds"] = tuple(int(s) for s in d["seeds"])
        return cls(**d)


class Adam:
    """Adam; weight decay is an L2 term added to the gradient unless ``decoupled``."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, decoupled=False):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay, self.decoupled = weight_decay, decoupled
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self._scratch = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = np.zeros(p.shape) if p.grad is None else p.grad
            theta = p.data
            # moments and scratch are reused in place: fresh temporaries dominate the step for wide heads
            m, v, buf = self.m[i], self.v[i], self._scratch[i]
            if self.weight_decay and not self.decoupled:
                g = np.add(g, np.multiply(theta, self.weight_decay, out=buf), out=buf)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            sq = np.square(g, out=buf)
            sq *= 1 - self.beta2
            v += sq
            denom = np.divide(v, c2, out=buf)
            np.sqrt(denom, out=denom)
            denom += self.eps
            update = np.divide(m, denom, out=denom)
            update *= self.lr / c1
            if self.weight_decay and self.decoupled:
                update += self.lr * self.weight_decay * theta
            new = theta - update
            new.flags.writeable = False
            p.data = new


class EarlyStopping:
    """Tracks the best score; ``update`` returns True once ``patience`` epochs pass without a strict improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_score = -math.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, score: float) -> bool:
        self.epoch += 1
        if score > self.best_score:
            self.best_score, self.best_epoch = score, self.epoch
        return self.epoch - self.best_epoch >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


# -- metrics ------------------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    support: tuple[int, ...]
    confusion: tuple[tuple[int, ...], ...]
    macro_f1: float
    accuracy: float

    def to_dict(self) -> dict:
        return {k: (list(map(list, v)) if k == "confusion" else list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


def classification_metrics(y_true, y_pred, num_classes: int) -> Metrics:
    """Per-class precision/recall/F1 over the full label space; classes with P+R = 0 score F1 = 0."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ContractError(f"{y_true.shape[0]} labels vs {y_pred.shape[0]} predictions")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(np.float64)
    pred_n = cm.sum(axis=0)
    true_n = cm.sum(axis=1)
    precision = np.divide(tp, pred_n, out=np.zeros(num_classes), where=pred_n > 0)
    recall = np.divide(tp, true_n, out=np.zeros(num_classes), where=true_n > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(num_classes), where=denom > 0)
    acc = float(tp.sum() / y_true.size) if y_true.size else 0.0
    return Metrics(
        tuple(precision.tolist()), tuple(recall.tolist()), tuple(f1.tolist()),
        tuple(int(s) for s in true_n), tuple(tuple(int(v) for v in row) for row in cm),
        float(f1.mean()), acc,
    )


def predict_logits(model: StreamModel, batch: HistoryBatch, chunk: int = EVAL_BATCH) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            parts = [model(batch.select(np.arange(s, min(s + chunk, len(batch))))).data for s in range(0, len(batch), chunk)]
    finally:
        model.train(was_training)
    return np.concatenate(parts) if parts else np.zeros((0, model.cfg.head.num_classes))


def evaluate(model: StreamModel, batch: HistoryBatch, labels=None) -> Metrics:
    labels = batch.labels if labels is None else np.asarray(labels)
    if (labels < 0).any():
        raise ContractError("evaluation needs labels for every sample")
    preds = predict_logits(model, batch).argmax(axis=1)
    return classification_metrics(labels, preds, model.cfg.head.num_classes)


# -- training ------------------------------------------------------------------------


@dataclass
class TrainReport:
    train_losses: list[float]
    val_losses: list[float]
    val_f1: list[float]
    best_epoch: int
    epochs_run: int
    val: Metrics
    test: Metrics | None
    config: dict
    spec: dict
    seed: int
    fold: int | None = None
    wall_clock: float = 0.0
    notes: list[str] = field(default_factory=list)
    state: dict | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        """JSON-ready summary; wall-clock time sits under ``timestamp`` so the rest is reproducible."""
        return {
            "config": self.config,
            "spec": self.spec,
            "seed": self.seed,
            "fold": self.fold,
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "val_macro_f1_trace": self.val_f1,
            "val": self.val.to_dict(),
            "test": None if self.test is None else self.test.to_dict(),
            "notes": self.notes,
            "timestamp": {"wall_clock_seconds": self.wall_clock},
        }


def _loss_fn(spec: TrainSpec, train_labels: np.ndarray, num_classes: int):
    if spec.loss == "cross_entropy":
        return nn.cross_entropy
    focal = nn.FocalLossSpec.from_labels(train_labels, num_classes, spec.gamma)
    return lambda logits, labels: nn.focal_loss(logits, labels, focal)


def _score(model, batch: HistoryBatch, loss_fn) -> tuple[float, Metrics]:
    """Mean loss and metrics from a single evaluation pass."""
    logits = predict_logits(model, batch)
    with ad.no_grad():
        loss = float(loss_fn(ad.as_tensor(logits), batch.labels).item())
    return loss, classification_metrics(batch.labels, logits.argmax(axis=1), model.cfg.head.num_classes)


def train_model(model: StreamModel, batch: HistoryBatch, train_idx, val_idx, test_idx=None, spec: TrainSpec | None = None, seed: int = 0, fold: int | None = None) -> TrainReport:
    """Mini-batch training with early stopping on validation macro-F1; best-epoch parameters are restored."""
    spec = spec or TrainSpec()
    started = time.perf_counter()
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise ContractError("empty training set")
    labelled = batch.labels >= 0
    train_idx = train_idx[labelled[train_idx]]
    val_idx = val_idx[labelled[val_idx]]
    notes = []
    if val_idx.size == 0:
        notes.append("empty validation split: early stopping monitors the training set")
        val_idx = train_idx
    num_classes = model.cfg.head.num_classes
    train_b, val_b = batch.select(train_idx), batch.select(val_idx)
    loss_fn = _loss_fn(spec, train_b.labels, num_classes)
    opt = Adam(model.parameters(), spec.lr, spec.beta1, spec.beta2, spec.eps, spec.weight_decay, spec.decoupled_weight_decay)
    stopper = EarlyStopping(spec.patience)
    best_state = model.state_dict()
    train_losses, val_losses, val_f1 = [], [], []
    for epoch in range(1, spec.max_epochs + 1):
        model.train()
        order = np.random.default_rng([seed, epoch]).permutation(len(train_b))
        total = 0.0
        for bi, s in enumerate(range(0, len(order), spec.batch_size)):
            mb = train_b.select(order[s : s + spec.batch_size])
            model.zero_grad()
            try:
                loss = loss_fn(model(mb), mb.labels)
            except DomainError as exc:
                raise DivergenceError(epoch, bi, float("nan")) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, bi, value)
            loss.backward()
            opt.step()
            total += value * len(mb)
        train_losses.append(total / len(train_b))
        val_loss, val_metrics = _score(model, val_b, loss_fn)
        val_losses.append(val_loss)
        score = val_metrics.macro_f1
        val_f1.append(score)
        stop = stopper.update(score)
        if stopper.improved:
            best_state = model.state_dict()
        if stop:
            break
    model.load_state_dict(best_state)
    val_metrics = evaluate(model, val_b)
    test_metrics = None
    if test_idx is not None:
        test_idx = np.asarray(test_idx, dtype=np.int64)
        test_idx = test_idx[labelled[test_idx]]
        if test_idx.size:
            test_metrics = evaluate(model, batch.select(test_idx))
    return TrainReport(
        train_losses, val_losses, val_f1, stopper.best_epoch, stopper.epoch, val_metrics, test_metrics,
        model.cfg.to_dict(), spec.to_dict(), seed, fold, time.perf_counter() - started, notes, best_state,
    )


# -- experiments ---------------------------------------------------------------------------


def _run_one(args) -> TrainReport:
    cfg, batch, fold_idx, spec, seed, fold = args
    cfg = replace(cfg, seed=seed)
    model = build_model(cfg, InputDims.from_batch(batch))
    return train_model(model, batch, fold_idx.train, fold_idx.val, fold_idx.test, spec, seed, fold)


def _map(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))  # map preserves submission order


def run_experiment(cfg: ModelConfig, dataset: StreamDataset, plan: SplitPlan, spec: TrainSpec, seeds=None, folds=None, jobs: int = 1, batch: HistoryBatch | None = None) -> list[TrainReport]:
    """Train ``cfg`` on every (fold, seed); reports come back in (fold, seed) order."""
    batch = batch if batch is not None else batch_for(cfg, dataset)
    seeds = tuple(spec.seeds if seeds is None else seeds)
    folds = range(len(plan)) if folds is None else folds
    tasks = [(cfg, batch, plan.sample_indices(batch.index, f), spec, s, f) for f in folds for s in seeds]
    return _map(_run_one, tasks, jobs)


@dataclass(frozen=True)
class GridSpec:
    """Hyperparameter name -> candidate values; ``train.*`` keys target the TrainSpec, others the ModelConfig."""

    values: dict

    def __post_init__(self):
        if not self.values or any(len(v) == 0 for v in self.values.values()):
            raise ConfigError("grid must name at least one parameter, each with at least one value")

    def points(self) -> list[dict]:
        keys = list(self.values)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.values[k] for k in keys))]

    def __len__(self) -> int:
        return math.prod(len(v) for v in self.values.values())


def apply_point(cfg: ModelConfig, spec: TrainSpec, point: dict) -> tuple[ModelConfig, TrainSpec]:
    model_over = {k: v for k, v in point.items() if not k.startswith("train.")}
    train_over = {k[len("train."):]: v for k, v in point.items() if k.startswith("train.")}
    if train_over:
        spec = TrainSpec.from_dict({**spec.to_dict(), **train_over})
    return (cfg.with_overrides(model_over) if model_over else cfg), spec


@dataclass
class GridResult:
    rows: list[dict]
    skipped: list[dict]
    best_index: int | None
    best_point: dict | None
    best_config: ModelConfig | None
    mean_val: dict
    global_best_test: dict | None
    per_fold_best_test: dict | None
    reports: list[TrainReport] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {
            "best_index": self.best_index,
            "best_point": self.best_point,
            "best_config": None if self.best_config is None else self.best_config.to_dict(),
            "mean_val_macro_f1": {str(k): v for k, v in self.mean_val.items()},
            "global_best_test": self.global_best_test,
            "per_fold_best_test": self.per_fold_best_test,
            "skipped": self.skipped,
        }


def run_hash(config: dict, spec: dict) -> str:
    """Short digest identifying a (model config, train spec) pair; seeds are excluded."""
    model = {k: v for k, v in config.items() if k != "seed"}
    train = {k: v for k, v in spec.items() if k != "seeds"}
    blob = json.dumps({"model": model, "train": train}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def result_row(report: TrainReport, point_index: int = 0, point: dict | None = None) -> dict:
    cfg_hash = run_hash(report.config, report.spec)
    row = {
        "config_hash": cfg_hash,
        "point_index": point_index,
        "params": point or {},
        "fold": report.fold,
        "seed": report.seed,
        "best_epoch": report.best_epoch,
        "epochs_run": report.epochs_run,
        "val_macro_f1": report.val.macro_f1,
        "val_f1": list(report.val.f1),
    }
    if report.test is not None:
        row["test_macro_f1"] = report.test.macro_f1
        row["test_f1"] = list(report.test.f1)
        row["test_accuracy"] = report.test.accuracy
    return row


def _mean_test(rows: list[dict]) -> dict | None:
    rows = [r for r in rows if "test_macro_f1" in r]
    if not rows:
        return None
    return {
        "macro_f1": float(np.mean([r["test_macro_f1"] for r in rows])),
        "f1": np.mean([r["test_f1"] for r in rows], axis=0).tolist(),
        "runs": len(rows),
    }


def grid_search(cfg: ModelConfig, grid: GridSpec, dataset: StreamDataset, plan: SplitPlan, spec: TrainSpec, seeds=None, folds=None, jobs: int = 1) -> GridResult:
    """Evaluate every grid point over folds x seeds and select by mean validation macro-F1 (first wins ties)."""
    seeds = tuple(spec.seeds if seeds is None else seeds)
    folds = list(range(len(plan)) if folds is None else folds)
    batches: dict[tuple, HistoryBatch] = {}
    tasks, owners, skipped = [], [], []
    for pi, point in enumerate(grid.points()):
        try:
            pcfg, pspec = apply_point(cfg, spec, point)
            key = (pcfg.input_mode, pcfg.w, pcfg.k, pcfg.n)
            if key not in batches:
                batches[key] = batch_for(pcfg, dataset)
            build_model(pcfg, InputDims.from_batch(batches[key]))  # fail fast on shape problems
        except SigStreamError as exc:
            skipped.append({"point_index": pi, "params": point, "reason": str(exc)})
            continue
        b = batches[key]
        for f in folds:
            for s in seeds:
                tasks.append((pcfg, b, plan.sample_indices(b.index, f), pspec, s, f))
                owners.append((pi, point))
    if not tasks:
        raise ConfigError("every grid point is infeasible: " + "; ".join(s["reason"] for s in skipped))
    reports = _map(_run_one, tasks, jobs)
    rows = [result_row(r, pi, point) for r, (pi, point) in zip(reports, owners)]

    mean_val: dict[int, float] = {}
    for pi in dict.fromkeys(pi for pi, _ in owners):
        mean_val[pi] = float(np.mean([r["val_macro_f1"] for r in rows if r["point_index"] == pi]))
    best = max(mean_val, key=lambda pi: (mean_val[pi], -pi))
    best_point = next(p for pi, p in owners if pi == best)
    global_best = _mean_test([r for r in rows if r["point_index"] == best])

    per_fold_rows = []
    for f in folds:
        fold_rows = [r for r in rows if r["fold"] == f]
        fold_val = {}
        for r in fold_rows:
            fold_val.setdefault(r["point_index"], []).append(r["val_macro_f1"])
        fbest = max(fold_val, key=lambda pi: (float(np.mean(fold_val[pi])), -pi))
        per_fold_rows.extend(r for r in fold_rows if r["point_index"] == fbest)
    per_fold = _mean_test(per_fold_rows)
    best_cfg, _ = apply_point(cfg, spec, best_point)
    return GridResult(rows, skipped, best, best_point, best_cfg, mean_val, global_best, per_fold, reports)


# -- results I/O ------------------------------------------------------------------------------


def write_jsonl(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def summary_table(rows: list[dict], num_classes: int, class_names=None, key: str = "test") -> str:
    """Aligned table: one line per grid point, class F1 columns in label order, then macro-F1."""
    names = list(class_names) if class_names else [str(c) for c in range(num_classes)]
    header = ["point", "config", "runs", *[f"F1[{n}]" for n in names], "macro-F1"]
    lines = [header]
    groups: dict[int, list[dict]] = {}
    for r in rows:
        groups.setdefault(r["point_index"], []).append(r)
    for pi, rs in groups.items():
        use = [r for r in rs if f"{key}_f1" in r]
        if not use:
            continue
        f1 = np.mean([r[f"{key}_f1"] for r in use], axis=0)
        macro = float(np.mean([r[f"{key}_macro_f1"] for r in use]))
        lines.append([str(pi), rs[0]["config_hash"], str(len(use)), *[f"{v:.4f}" for v in f1], f"{macro:.4f}"])
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join("  ".join(cell.rjust(widths[i]) for i, cell in enumerate(row)) for row in lines)


def seed_mean(values) -> float:
    values = list(values)
    if not values:
        raise ContractError("no runs to average")
    return float(sum(values) / len(values))


def save_report(report: TrainReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
