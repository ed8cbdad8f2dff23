"""Time-scale and event-run statistics of a labelled stream dataset."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import StreamDataset


@dataclass(frozen=True)
class EventStats:
    label: int
    mean_consecutive: float | None
    median_consecutive: float | None
    mean_per_stream: float
    median_per_stream: float
    runs: int
    events: int


@dataclass(frozen=True)
class StatsReport:
    mean_time_diff: float | None
    median_time_diff: float | None
    events: tuple[EventStats, ...]
    num_streams: int
    num_records: int
    warnings: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "num_streams": self.num_streams,
            "num_records": self.num_records,
            "mean_time_diff_seconds": self.mean_time_diff,
            "median_time_diff_seconds": self.median_time_diff,
            "events": [e.__dict__ for e in self.events],
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def rows(self) -> list[tuple[str, list[str]]]:
        """Table rows: one per statistic family, one column per event class."""
        fmt = lambda v: "-" if v is None else f"{v:.2f}"  # noqa: E731
        out = [
            ("Mean Point Time Diff.", [format_seconds(self.mean_time_diff)]),
            ("Median Point Time Diff.", [format_seconds(self.median_time_diff)]),
        ]
        out.append(("Mean consecutive events", [fmt(e.mean_consecutive) for e in self.events]))
        out.append(("Median consecutive events", [fmt(e.median_consecutive) for e in self.events]))
        out.append(("Mean no. of events in stream", [fmt(e.mean_per_stream) for e in self.events]))
        out.append(("Median no. of events in stream", [fmt(e.median_per_stream) for e in self.events]))
        return out


def format_seconds(seconds: float | None) -> str:
    """``60.0`` -> ``'60s (1min)'``; ``5200`` -> ``'5200s (1hr 26min 40sec)'``."""
    if seconds is None:
        return "-"
    total = int(round(seconds))
    h, rem = divmod(total, 3600)
    m, s = divmod(rem, 60)
    parts = [f"{h}hr"] if h else []
    if m:
        parts.append(f"{m}min")
    if s or not parts:
        parts.append(f"{s}sec")
    plain = f"{seconds:g}s"
    human = " ".join(parts)
    return plain if human == f"{total}sec" and float(total) == seconds else f"{plain} ({human})"


def _runs(flags: np.ndarray) -> list[int]:
    runs, cur = [], 0
    for f in flags:
        if f:
            cur += 1
        elif cur:
            runs.append(cur)
            cur = 0
    if cur:
        runs.append(cur)
    return runs


def dataset_stats(dataset: StreamDataset, event_classes=()) -> StatsReport:
    slices = list(dataset.stream_slices().values())
    warnings = []
    mean_td = median_td = None
    if dataset.has_timestamps:
        diffs = np.concatenate([np.diff(dataset.timestamps[sl]) for sl in slices]) if slices else np.array([])
        if diffs.size:
            mean_td, median_td = float(diffs.mean()), float(np.median(diffs))
    else:
        warnings.append("no timestamps: time-difference rows omitted")
    if (dataset.labels < 0).any():
        warnings.append(f"{int((dataset.labels < 0).sum())} unlabelled records ignored in event statistics")

    events = []
    for label in event_classes:
        label = int(label)
        all_runs, per_stream = [], []
        for sl in slices:
            flags = dataset.labels[sl] == label
            all_runs.extend(_runs(flags))
            per_stream.append(int(flags.sum()))
        per_stream_arr = np.asarray(per_stream, dtype=float) if per_stream else np.zeros(1)
        events.append(
            EventStats(
                label=label,
                mean_consecutive=float(np.mean(all_runs)) if all_runs else None,
                median_consecutive=float(np.median(all_runs)) if all_runs else None,
                mean_per_stream=float(per_stream_arr.mean()),
                median_per_stream=float(np.median(per_stream_arr)),
                runs=len(all_runs),
                events=int(sum(per_stream)),
            )
        )
    return StatsReport(mean_td, median_td, tuple(events), len(slices), len(dataset), tuple(warnings))
