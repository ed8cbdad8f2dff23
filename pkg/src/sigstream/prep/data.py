"""Stream datasets and their on-disk formats.

Metadata is a UTF-8 CSV with a header. Required columns: ``stream_id`` and
``label`` (an empty cell means unlabelled). Optional: ``timestamp``
(RFC 3339; naive values are read as UTC), ``classify`` (0/1, default 1),
``position`` (integer order within a stream) and any number of numeric
``external_*`` columns.

Embeddings live in a little-endian binary container::

    b"SGEM" | version u32 | rows u32 | cols u32 | rows*cols values, row-major

Version 1 stores float32 values (upcast to float64 on load); version 2
stores float64 and is used for checkpoints and prepared artefacts.
"""

from __future__ import annotations

import csv
import dataclasses
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator

import numpy as np

from ..errors import ContractError, LoadError

MAGIC = b"SGEM"
_HEADER = struct.Struct("<4sIII")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def write_matrix(path, matrix, version: int = 1) -> None:
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"container holds 2-D matrices, got shape {arr.shape}")
    if version not in _DTYPES:
        raise ContractError(f"unknown container version {version}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, version, arr.shape[0], arr.shape[1]))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[version]).tobytes())


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc.strerror}") from None
    if len(raw) < _HEADER.size:
        raise LoadError(f"{path}: truncated header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise LoadError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version not in _DTYPES:
        raise LoadError(f"{path}: unsupported format version {version}")
    dt = _DTYPES[version]
    expected = _HEADER.size + rows * cols * dt.itemsize
    if len(raw) != expected:
        raise LoadError(f"{path}: expected {expected} bytes for {rows}x{cols} v{version}, found {len(raw)}")
    vals = np.frombuffer(raw, dtype=dt, offset=_HEADER.size, count=rows * cols)
    return vals.astype(np.float64).reshape(rows, cols)


@dataclass(frozen=True)
class StreamRecord:
    stream_id: str
    timestamp: datetime | None
    label: int | None
    embedding: np.ndarray
    external: np.ndarray | None
    classify: bool


@dataclass(frozen=True)
class FeatureInfo:
    """A derived per-record feature and where it enters the model."""

    name: str
    standardize: str = "none"
    in_path: bool = True
    in_input: bool = False
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class StreamDataset:
    """Chronologically ordered records stored column-wise.

    ``timestamps`` holds POSIX seconds (NaN when absent). ``labels`` uses -1
    for unlabelled records. ``reduced`` is the in-path linguistic channel
    block; until :func:`~sigstream.prep.features.reduce_dims` runs it equals
    ``embeddings``.
    """

    stream_ids: np.ndarray
    timestamps: np.ndarray | None
    labels: np.ndarray
    embeddings: np.ndarray
    classify: np.ndarray
    num_classes: int
    external: np.ndarray | None = None
    external_names: tuple[str, ...] = ()
    external_in_path: bool = False
    external_in_input: bool = True
    reduced: np.ndarray | None = None
    reduction: dict = field(default_factory=lambda: {"method": "none"})
    features: dict[str, np.ndarray] = field(default_factory=dict)
    feature_info: tuple[FeatureInfo, ...] = ()

    def __len__(self) -> int:
        return len(self.stream_ids)

    @property
    def embedding_dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def path_embeddings(self) -> np.ndarray:
        return self.embeddings if self.reduced is None else self.reduced

    @property
    def has_timestamps(self) -> bool:
        return self.timestamps is not None and not np.isnan(self.timestamps).any()

    def streams(self) -> list[str]:
        return list(dict.fromkeys(self.stream_ids.tolist()))

    def stream_slices(self) -> dict[str, slice]:
        """Contiguous record range of every stream."""
        out: dict[str, slice] = {}
        ids = self.stream_ids
        start = 0
        for i in range(1, len(ids) + 1):
            if i == len(ids) or ids[i] != ids[start]:
                out[str(ids[start])] = slice(start, i)
                start = i
        return out

    def positions(self) -> np.ndarray:
        """0-based position of each record inside its stream."""
        pos = np.zeros(len(self), dtype=np.int64)
        for sl in self.stream_slices().values():
            pos[sl] = np.arange(sl.stop - sl.start)
        return pos

    def records(self) -> Iterator[StreamRecord]:
        for i in range(len(self)):
            ts = None
            if self.timestamps is not None and not np.isnan(self.timestamps[i]):
                ts = datetime.fromtimestamp(self.timestamps[i], tz=timezone.utc)
            yield StreamRecord(
                stream_id=str(self.stream_ids[i]),
                timestamp=ts,
                label=int(self.labels[i]) if self.labels[i] >= 0 else None,
                embedding=self.embeddings[i],
                external=None if self.external is None else self.external[i],
                classify=bool(self.classify[i]),
            )

    def path_features(self) -> np.ndarray:
        """In-path channels: reduced embedding, in-path features, in-path externals."""
        blocks = [self.path_embeddings]
        blocks += [self.features[f.name][:, None] for f in self.feature_info if f.in_path]
        if self.external is not None and self.external_in_path:
            blocks.append(self.external)
        return np.concatenate(blocks, axis=1)

    def input_features(self) -> np.ndarray:
        """In-input extras appended to the current point's embedding."""
        blocks = [self.features[f.name][:, None] for f in self.feature_info if f.in_input]
        if self.external is not None and self.external_in_input:
            blocks.append(self.external)
        if not blocks:
            return np.zeros((len(self), 0))
        return np.concatenate(blocks, axis=1)

    def replace(self, **changes) -> "StreamDataset":
        return dataclasses.replace(self, **changes)


def parse_timestamp(text: str) -> float:
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text.replace(" ", "T", 1) if "T" not in text and " " in text else text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _read_metadata(path: Path):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in ("stream_id", "label") if c not in header]
        if missing:
            raise LoadError(f"{path}: missing required column(s) {', '.join(missing)}")
        rows = list(reader)
    return header, rows


def load_dataset(metadata_file, embedding_file, num_classes: int | None = None) -> StreamDataset:
    """Load metadata CSV and embedding container into a sorted :class:`StreamDataset`."""
    metadata_file, embedding_file = Path(metadata_file), Path(embedding_file)
    emb = read_matrix(embedding_file)
    header, rows = _read_metadata(metadata_file)
    if emb.shape[0] != len(rows):
        raise LoadError(
            f"embedding file {embedding_file} has {emb.shape[0]} rows but metadata {metadata_file} has {len(rows)} rows"
        )
    ext_cols = [c for c in header if c.startswith("external_")]
    has_ts = "timestamp" in header
    has_pos = "position" in header

    n = len(rows)
    ids = np.empty(n, dtype=object)
    labels = np.full(n, -1, dtype=np.int64)
    ts = np.full(n, np.nan) if has_ts else None
    classify = np.ones(n, dtype=bool)
    pos = np.zeros(n, dtype=np.int64)
    ext = np.zeros((n, len(ext_cols))) if ext_cols else None
    for r, row in enumerate(rows):
        line = r + 2  # header is line 1
        sid = (row.get("stream_id") or "").strip()
        if not sid:
            raise LoadError(f"{metadata_file}:{line}: empty stream_id")
        ids[r] = sid
        lab = (row.get("label") or "").strip()
        if lab:
            try:
                labels[r] = int(lab)
            except ValueError:
                raise LoadError(f"{metadata_file}:{line}: label {lab!r} is not an integer") from None
            if labels[r] < 0:
                raise LoadError(f"{metadata_file}:{line}: negative label {labels[r]}")
        if has_ts and (row.get("timestamp") or "").strip():
            try:
                ts[r] = parse_timestamp(row["timestamp"])
            except ValueError:
                raise LoadError(f"{metadata_file}:{line}: unparseable timestamp {row['timestamp']!r}") from None
        if "classify" in header:
            flag = (row.get("classify") or "1").strip()
            if flag not in ("0", "1"):
                raise LoadError(f"{metadata_file}:{line}: classify must be 0 or 1, got {flag!r}")
            classify[r] = flag == "1"
        if has_pos:
            try:
                pos[r] = int(row["position"])
            except (TypeError, ValueError):
                raise LoadError(f"{metadata_file}:{line}: position {row.get('position')!r} is not an integer") from None
        for j, col in enumerate(ext_cols):
            try:
                ext[r, j] = float(row[col])
            except (TypeError, ValueError):
                raise LoadError(f"{metadata_file}:{line}: {col}={row.get(col)!r} is not numeric") from None
            if not np.isfinite(ext[r, j]):
                raise LoadError(f"{metadata_file}:{line}: {col} is not finite")

    if has_pos:
        seen: dict[tuple, int] = {}
        for r in range(n):
            key = (ids[r], int(pos[r]))
            if key in seen:
                raise LoadError(
                    f"{metadata_file}: rows {seen[key] + 2} and {r + 2} collide on (stream_id, position) = {key}"
                )
            seen[key] = r
    if ts is not None and np.isnan(ts).all():
        ts = None

    tkey = np.zeros(n) if ts is None else np.where(np.isnan(ts), -np.inf, ts)
    order = np.lexsort((np.arange(n), pos, tkey, ids.astype(str)))
    present = labels[labels >= 0]
    k = int(present.max()) + 1 if present.size else 0
    if num_classes is not None:
        if k > num_classes:
            raise LoadError(f"label {k - 1} out of range for {num_classes} classes")
        k = num_classes
    return StreamDataset(
        stream_ids=ids[order],
        timestamps=None if ts is None else ts[order],
        labels=labels[order],
        embeddings=emb[order],
        classify=classify[order],
        num_classes=k,
        external=None if ext is None else ext[order],
        external_names=tuple(ext_cols),
    )


def dataset_from_arrays(
    stream_ids,
    embeddings,
    labels=None,
    timestamps=None,
    classify=None,
    external=None,
    num_classes: int | None = None,
) -> StreamDataset:
    """Build a dataset in memory; rows are sorted exactly as :func:`load_dataset` does."""
    ids = np.asarray(stream_ids).astype(object)
    emb = np.asarray(embeddings, dtype=np.float64)
    n = len(ids)
    if emb.shape[0] != n:
        raise LoadError(f"{emb.shape[0]} embedding rows for {n} records")
    lab = np.full(n, -1, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    ts = None if timestamps is None else np.asarray(timestamps, dtype=np.float64)
    cls = np.ones(n, dtype=bool) if classify is None else np.asarray(classify, dtype=bool)
    tkey = np.zeros(n) if ts is None else np.where(np.isnan(ts), -np.inf, ts)
    order = np.lexsort((np.arange(n), tkey, ids.astype(str)))
    present = lab[lab >= 0]
    k = num_classes if num_classes is not None else (int(present.max()) + 1 if present.size else 0)
    ext = None if external is None else np.asarray(external, dtype=np.float64)[order]
    return StreamDataset(
        stream_ids=ids[order],
        timestamps=None if ts is None else ts[order],
        labels=lab[order],
        embeddings=emb[order],
        classify=cls[order],
        num_classes=k,
        external=ext,
        external_names=tuple(f"external_{i}" for i in range(0 if ext is None else ext.shape[1])),
    )
