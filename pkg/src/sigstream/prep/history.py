"""Padded window- and unit-based history inputs.

For the record at stream position ``i`` the window holds positions
``i-(w-1) .. i``. In unit mode the q-th unit (1-based, q = 1..n) holds
``i-(n-q)k-(w-1) .. i-(n-q)k``, so the last unit ends at the current point
and the units jointly cover ``k*n + (w-k)`` positions. Positions before the
stream start are zero rows with ``pad_mask`` False, always placed before the
real rows.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ..errors import ContractError, SigStreamError
from .data import StreamDataset

MEMORY_BUDGET_BYTES = 2 * 1024**3


class ResourceError(SigStreamError):
    """The requested history tensors would exceed the memory budget."""


@dataclass(frozen=True)
class HistoryBatch:
    """Model input built from a dataset.

    Shapes: ``points`` is ``[B, n, w, C]`` (unit) or ``[B, w, C]`` (window);
    ``pad_mask`` drops the channel axis; ``current`` is ``[B, e + extras]``;
    ``full`` is the window of full embeddings ``[B, w, e]`` (window mode
    only); ``positions`` holds the stream-relative position of every slot
    (negative for pads); ``index`` maps samples back to dataset records.
    """

    mode: str
    w: int
    k: int
    n: int
    points: np.ndarray
    pad_mask: np.ndarray
    current: np.ndarray
    labels: np.ndarray
    index: np.ndarray
    stream_ids: np.ndarray
    positions: np.ndarray
    embedding_dim: int
    full: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def history_length(self) -> int:
        return self.w if self.mode == "window" else self.k * self.n + (self.w - self.k)

    @property
    def path_channels(self) -> int:
        return self.points.shape[-1]

    def select(self, idx) -> "HistoryBatch":
        idx = np.asarray(idx, dtype=np.intp)
        return dataclasses.replace(
            self,
            points=self.points[idx],
            pad_mask=self.pad_mask[idx],
            current=self.current[idx],
            labels=self.labels[idx],
            index=self.index[idx],
            stream_ids=self.stream_ids[idx],
            positions=self.positions[idx],
            full=None if self.full is None else self.full[idx],
        )

    def with_extra_padding(self, rows: int) -> "HistoryBatch":
        """Prepend ``rows`` padded rows to every window (or every unit)."""

        def prepend(a, fill, axis):
            shape = list(a.shape)
            shape[axis] = rows
            return np.concatenate([np.full(shape, fill, dtype=a.dtype), a], axis=axis)

        extra = self.positions[..., :1] - np.arange(rows, 0, -1)
        return dataclasses.replace(
            self,
            w=self.w + rows,
            points=prepend(self.points, 0.0, -2),
            pad_mask=prepend(self.pad_mask, False, -1),
            positions=np.concatenate([extra, self.positions], axis=-1),
            full=None if self.full is None else prepend(self.full, 0.0, -2),
        )


def _sample_rows(dataset: StreamDataset) -> np.ndarray:
    rows = np.flatnonzero(dataset.classify)
    if rows.size == 0:
        raise ContractError("no classifiable records (classify=1) to build a batch from")
    return rows


def _check_budget(n_values: int) -> None:
    need = n_values * 8
    if need > MEMORY_BUDGET_BYTES:
        raise ResourceError(f"history tensors need {need / 1024**3:.2f} GiB, budget is {MEMORY_BUDGET_BYTES / 1024**3:.2f} GiB")


def _gather(dataset: StreamDataset, rows: np.ndarray, rel: np.ndarray):
    """Fetch records at stream-relative offsets ``rel`` (<= 0) from each sample row."""
    pos = dataset.positions()
    start = rows - pos[rows]  # first record of each sample's stream
    target_pos = pos[rows].reshape((-1,) + (1,) * rel.ndim) + rel[None]
    valid = target_pos >= 0
    src = np.where(valid, start.reshape((-1,) + (1,) * rel.ndim) + target_pos, 0)
    return src, valid, target_pos


def _common(dataset: StreamDataset, rows: np.ndarray):
    current = np.concatenate([dataset.embeddings[rows], dataset.input_features()[rows]], axis=1)
    return current, dataset.labels[rows].copy(), dataset.stream_ids[rows].copy()


def build_window_input(dataset: StreamDataset, w: int) -> HistoryBatch:
    if w < 2:
        raise ContractError(f"window size must be >= 2, got {w}")
    rows = _sample_rows(dataset)
    feats = dataset.path_features()
    _check_budget(len(rows) * w * (feats.shape[1] + dataset.embedding_dim + 2))
    rel = np.arange(-(w - 1), 1)
    src, valid, target = _gather(dataset, rows, rel)
    points = np.where(valid[..., None], feats[src], 0.0)
    full = np.where(valid[..., None], dataset.embeddings[src], 0.0)
    current, labels, sids = _common(dataset, rows)
    return HistoryBatch(
        mode="window", w=w, k=w, n=1,
        points=points, pad_mask=valid, current=current, labels=labels,
        index=rows, stream_ids=sids, positions=target, embedding_dim=dataset.embedding_dim, full=full,
    )


def unit_offsets(w: int, k: int, n: int) -> np.ndarray:
    """Offsets relative to the current point, shape ``[n, w]``."""
    q = np.arange(1, n + 1)[:, None]
    return -(n - q) * k - (w - 1) + np.arange(w)[None, :]


def build_unit_input(dataset: StreamDataset, w: int, k: int, n: int) -> HistoryBatch:
    if w < 2:
        raise ContractError(f"window size must be >= 2, got {w}")
    if k < 1 or n < 1:
        raise ContractError(f"need k >= 1 and n >= 1, got k={k}, n={n}")
    if k > w:
        raise ContractError(f"shift k={k} exceeds window w={w}; units would leave gaps")
    rows = _sample_rows(dataset)
    feats = dataset.path_features()
    _check_budget(len(rows) * n * w * (feats.shape[1] + 2))
    rel = unit_offsets(w, k, n)
    src, valid, target = _gather(dataset, rows, rel)
    points = np.where(valid[..., None], feats[src], 0.0)
    current, labels, sids = _common(dataset, rows)
    return HistoryBatch(
        mode="unit", w=w, k=k, n=n,
        points=points, pad_mask=valid, current=current, labels=labels,
        index=rows, stream_ids=sids, positions=target, embedding_dim=dataset.embedding_dim,
    )


def distinct_points(batch: HistoryBatch) -> np.ndarray:
    """Number of distinct stream positions (pads included) each sample covers."""
    flat = batch.positions.reshape(len(batch), -1)
    return np.array([np.unique(r).size for r in flat])
