"""Synthetic longitudinal streams whose labels depend on recent history."""

from __future__ import annotations

import csv
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .prep.data import StreamDataset, dataset_from_arrays, write_matrix

LOOKBACK = 10


def longitudinal_streams(
    num_streams: int = 200,
    length: int = 30,
    channels: int = 8,
    seed: int = 0,
    step_scale: float = 0.1,
    offset_scale: float = 1.0,
    noise_scale: float = 0.1,
    lookback: int = LOOKBACK,
    spacing_seconds: float = 60.0,
) -> StreamDataset:
    """Channel 0 is a per-stream offset plus a random walk; the rest is noise.

    The label of point ``i`` is 1 when channel 0 rose over the last ``lookback``
    points (``x[i] - x[max(i - lookback + 1, 0)] > 0``), else 0. The current
    point alone says little about that, so point-only models sit near chance
    while models that see the history can recover it.
    """
    rng = np.random.default_rng(seed)
    emb = rng.normal(0.0, noise_scale, size=(num_streams, length, channels))
    walk = np.cumsum(rng.normal(0.0, step_scale, size=(num_streams, length)), axis=1)
    offset = rng.normal(0.0, offset_scale, size=(num_streams, 1))
    emb[:, :, 0] = offset + walk
    start = np.maximum(np.arange(length) - (lookback - 1), 0)
    labels = (emb[:, :, 0] - emb[:, start, 0] > 0).astype(np.int64)
    ids = np.repeat(np.array([f"s{i:04d}" for i in range(num_streams)], dtype=object), length)
    ts = np.tile(np.arange(length) * spacing_seconds, num_streams) + 1.6e9
    return dataset_from_arrays(ids, emb.reshape(-1, channels), labels.reshape(-1), timestamps=ts, num_classes=2)


def write_fixture(dataset: StreamDataset, out_dir) -> tuple[Path, Path]:
    """Write ``metadata.csv`` and ``embeddings.sgem`` in the loader's input format."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta, emb = out / "metadata.csv", out / "embeddings.sgem"
    with open(meta, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["stream_id", "timestamp", "label", "classify"])
        for i in range(len(dataset)):
            ts = ""
            if dataset.timestamps is not None:
                ts = datetime.fromtimestamp(dataset.timestamps[i], tz=timezone.utc).isoformat()
            label = "" if dataset.labels[i] < 0 else int(dataset.labels[i])
            writer.writerow([dataset.stream_ids[i], ts, label, int(dataset.classify[i])])
    write_matrix(emb, dataset.embeddings)
    return meta, emb
