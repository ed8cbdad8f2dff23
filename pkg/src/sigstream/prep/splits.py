"""Train/validation/test split plans over dataset records."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ContractError
from .data import StreamDataset

# share of each training portion held out for validation
VAL_FRACTION = 0.33


@dataclass(frozen=True)
class Fold:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("train", "val", "test")}


@dataclass(frozen=True)
class SplitPlan:
    mode: str
    folds: tuple[Fold, ...]
    seed: int | None = None
    stratify_by_stream: bool = False
    options: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.folds)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "stratify_by_stream": self.stratify_by_stream,
            "options": self.options,
            "folds": [f.to_dict() for f in self.folds],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        folds = tuple(
            Fold(*(np.asarray(f[k], dtype=np.int64) for k in ("train", "val", "test"))) for f in d["folds"]
        )
        return cls(d["mode"], folds, d.get("seed"), bool(d.get("stratify_by_stream")), d.get("options", {}))

    def sample_indices(self, record_index: np.ndarray, fold: int) -> Fold:
        """Translate record indices of a fold into positions within a batch."""
        lookup = {int(r): i for i, r in enumerate(record_index)}
        f = self.folds[fold]
        pick = lambda recs: np.array([lookup[r] for r in recs.tolist() if r in lookup], dtype=np.int64)  # noqa: E731
        return Fold(pick(f.train), pick(f.val), pick(f.test))


def _groups(dataset: StreamDataset, stratify: bool) -> list[np.ndarray]:
    if stratify:
        return [np.arange(sl.start, sl.stop) for sl in dataset.stream_slices().values()]
    return [np.array([i]) for i in range(len(dataset))]


def _carve_val(groups: list[np.ndarray], rng: np.random.Generator, frac: float) -> tuple[np.ndarray, np.ndarray]:
    if not groups:
        return np.array([], dtype=np.int64), np.array([], dtype=np.int64)
    order = rng.permutation(len(groups))
    total = sum(len(g) for g in groups)
    target = frac * total
    val, taken = [], 0
    for gi in order:
        if taken >= target or len(val) == len(groups) - 1:
            break
        val.append(gi)
        taken += len(groups[gi])
    val_set = set(val)
    tr = [groups[i] for i in range(len(groups)) if i not in val_set]
    va = [groups[i] for i in sorted(val_set)]
    cat = lambda gs: np.sort(np.concatenate(gs)).astype(np.int64) if gs else np.array([], dtype=np.int64)  # noqa: E731
    return cat(tr), cat(va)


def make_splits(
    dataset: StreamDataset,
    mode: str = "kfold",
    *,
    folds: int = 5,
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    indices: dict | list | None = None,
    seed: int = 0,
    stratify_by_stream: bool = True,
    val_fraction: float = VAL_FRACTION,
) -> SplitPlan:
    """Build a deterministic :class:`SplitPlan`.

    ``kfold`` assigns whole groups (streams when ``stratify_by_stream``) to
    ``folds`` test folds, largest groups first, each to the currently smallest
    fold; validation is carved from the remaining training groups.
    ``single`` uses ``fractions`` for (train, val, test). ``predefined`` takes
    ``indices`` as a dict (or list of dicts) with train/val/test record lists.
    """
    n = len(dataset)
    if mode == "predefined":
        if indices is None:
            raise ContractError("predefined splits need indices")
        specs = indices if isinstance(indices, list) else [indices]
        out = []
        for spec in specs:
            arrs = []
            for key in ("train", "val", "test"):
                arr = np.asarray(spec.get(key, []), dtype=np.int64)
                if arr.size and (arr.min() < 0 or arr.max() >= n):
                    raise IndexError(f"predefined {key} indices out of range for {n} records")
                arrs.append(arr)
            out.append(Fold(*arrs))
        return SplitPlan("predefined", tuple(out), None, stratify_by_stream)

    rng = np.random.default_rng(seed)
    groups = _groups(dataset, stratify_by_stream)
    if mode == "kfold":
        if folds < 2:
            raise ContractError(f"kfold needs K >= 2, got {folds}")
        if len(groups) < folds:
            raise ContractError(f"{len(groups)} groups cannot fill {folds} folds")
        cap = math.ceil(n / folds)
        biggest = max(len(g) for g in groups)
        if biggest > cap:
            raise ContractError(f"a stream of {biggest} records exceeds the fold size {cap}; stream-level k-fold is infeasible")
        perm = rng.permutation(len(groups))
        order = sorted(perm.tolist(), key=lambda gi: -len(groups[gi]))  # stable: ties keep shuffled order
        loads = [0] * folds
        members: list[list[int]] = [[] for _ in range(folds)]
        for gi in order:
            f = min(range(folds), key=lambda j: (loads[j], j))
            members[f].append(gi)
            loads[f] += len(groups[gi])
        out = []
        for f in range(folds):
            test = np.sort(np.concatenate([groups[g] for g in members[f]])).astype(np.int64)
            rest = [groups[g] for j in range(folds) if j != f for g in members[j]]
            train, val = _carve_val(rest, np.random.default_rng([seed, f]), val_fraction)
            out.append(Fold(train, val, test))
        return SplitPlan("kfold", tuple(out), seed, stratify_by_stream, {"folds": folds, "val_fraction": val_fraction})

    if mode == "single":
        if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
            raise ContractError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
        perm = rng.permutation(len(groups))
        bounds = np.cumsum(fractions) * n
        parts: list[list[np.ndarray]] = [[], [], []]
        taken = 0
        for gi in perm:
            part = int(np.searchsorted(bounds, taken, side="right"))
            parts[min(part, 2)].append(groups[gi])
            taken += len(groups[gi])
        cat = lambda gs: np.sort(np.concatenate(gs)).astype(np.int64) if gs else np.array([], dtype=np.int64)  # noqa: E731
        fold = Fold(cat(parts[0]), cat(parts[1]), cat(parts[2]))
        return SplitPlan("single", (fold,), seed, stratify_by_stream, {"fractions": list(fractions)})

    raise ContractError(f"unknown split mode {mode!r}")
