"""Dimensionality reduction and time-derived features."""

from __future__ import annotations

import math
from datetime import datetime, timezone

import numpy as np

from ..errors import ContractError, DegenerateStatisticsError, DomainError
from .data import FeatureInfo, StreamDataset

REDUCTIONS = ("none", "grp", "ppa_pca", "ppa_pca_ppa")
TIME_FEATURES = ("time_encoding", "time_encoding_minute", "time_diff", "timeline_index")
STANDARDIZATIONS = ("none", "z_score", "sum_divide", "minmax")

# number of dominant directions removed by post-processing (PPA)
PPA_COMPONENTS = 2


# -- reduction -----------------------------------------------------------------


def _ppa(x: np.ndarray, fit: np.ndarray, n_remove: int = PPA_COMPONENTS):
    mean = fit.mean(axis=0)
    _, _, vt = np.linalg.svd(fit - mean, full_matrices=False)
    top = vt[:n_remove]
    centred = x - mean
    return centred - (centred @ top.T) @ top, (mean, top)


def _pca(x: np.ndarray, fit: np.ndarray, d: int):
    mean = fit.mean(axis=0)
    _, s, vt = np.linalg.svd(fit - mean, full_matrices=False)
    rank = int((s > s[0] * 1e-10).sum()) if s.size and s[0] > 0 else 0
    if rank < d:
        raise DomainError(f"covariance has rank {rank} < requested {d} components")
    comps = vt[:d]
    # sign convention: largest-magnitude loading of each component positive
    signs = np.sign(comps[np.arange(d), np.abs(comps).argmax(axis=1)])
    comps = comps * signs[:, None]
    return (x - mean) @ comps.T


def reduce_dims(dataset: StreamDataset, method: str = "none", d: int | None = None, seed: int = 0, fit_indices=None) -> StreamDataset:
    """Attach a reduced embedding block used as the in-path linguistic channels.

    ``fit_indices`` restricts fitting (mean, principal components) to the
    training records; the fitted map is applied to every record.
    """
    if method not in REDUCTIONS:
        raise ContractError(f"unknown reduction {method!r}; choose from {REDUCTIONS}")
    x = dataset.embeddings
    e = x.shape[1]
    if method == "none":
        return dataset.replace(reduced=x, reduction={"method": "none"})
    if d is None or d < 1 or d >= e:
        raise ContractError(f"reduced dimension must satisfy 1 <= d < {e}, got {d}")
    fit = x if fit_indices is None else x[np.asarray(fit_indices)]
    if method == "grp":
        rng = np.random.default_rng(seed)
        proj = rng.normal(0.0, 1.0 / math.sqrt(d), size=(e, d))
        out = x @ proj
    else:
        if fit.shape[0] <= d:
            raise DomainError(f"{fit.shape[0]} fitting rows cannot give rank {d}")
        s = np.linalg.svd(fit - fit.mean(axis=0), compute_uv=False)
        rank = int((s > s[0] * 1e-10).sum()) if s[0] > 0 else 0
        if rank - PPA_COMPONENTS < d:
            raise DomainError(f"covariance has rank {rank}; removing {PPA_COMPONENTS} components leaves fewer than {d}")
        cleaned, _ = _ppa(x, fit)
        fit_cleaned, _ = _ppa(fit, fit)
        out = _pca(cleaned, fit_cleaned, d)
        if method == "ppa_pca_ppa":
            fit_out = _pca(fit_cleaned, fit_cleaned, d)
            out, _ = _ppa(out, fit_out)
    return dataset.replace(reduced=out, reduction={"method": method, "dim": d, "seed": seed})


# -- time features ---------------------------------------------------------------


def _year_fraction(ts: float) -> float:
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    start = datetime(dt.year, 1, 1, tzinfo=timezone.utc).timestamp()
    end = datetime(dt.year + 1, 1, 1, tzinfo=timezone.utc).timestamp()
    return dt.year + (ts - start) / (end - start)


def _minute_fraction(ts: float) -> float:
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    return (dt.hour * 60 + dt.minute + (dt.second + dt.microsecond / 1e6) / 60.0) / 1440.0


def raw_time_feature(dataset: StreamDataset, name: str) -> np.ndarray:
    if name not in TIME_FEATURES:
        raise ContractError(f"unknown time feature {name!r}; choose from {TIME_FEATURES}")
    if name == "timeline_index":
        return dataset.positions().astype(np.float64) + 1.0
    if not dataset.has_timestamps:
        raise ContractError(f"time feature {name!r} needs a timestamp for every record")
    ts = dataset.timestamps
    if name == "time_encoding":
        return np.array([_year_fraction(t) for t in ts])
    if name == "time_encoding_minute":
        return np.array([_minute_fraction(t) for t in ts])
    diff = np.zeros(len(dataset))
    for sl in dataset.stream_slices().values():
        diff[sl.start + 1 : sl.stop] = np.diff(ts[sl])
    return diff


def fit_standardization(values: np.ndarray, method: str, name: str = "feature") -> dict:
    if method not in STANDARDIZATIONS:
        raise ContractError(f"unknown standardisation {method!r}; choose from {STANDARDIZATIONS}")
    if method == "none":
        return {}
    if values.size == 0:
        raise DegenerateStatisticsError(f"{name}: no values to fit {method}")
    if method == "z_score":
        mean, std = float(values.mean()), float(values.std())
        if std == 0:
            raise DegenerateStatisticsError(f"{name}: zero standard deviation under z_score")
        return {"mean": mean, "std": std}
    if method == "sum_divide":
        total = float(values.sum())
        if total == 0:
            raise DegenerateStatisticsError(f"{name}: zero sum under sum_divide")
        return {"sum": total}
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        raise DegenerateStatisticsError(f"{name}: zero range under minmax")
    return {"min": lo, "max": hi}


def apply_standardization(values: np.ndarray, method: str, params: dict) -> np.ndarray:
    if method == "none":
        return values.copy()
    if method == "z_score":
        return (values - params["mean"]) / params["std"]
    if method == "sum_divide":
        return values / params["sum"]
    if method == "minmax":
        return (values - params["min"]) / (params["max"] - params["min"])
    raise ContractError(f"unknown standardisation {method!r}")


def invert_standardization(values: np.ndarray, method: str, params: dict) -> np.ndarray:
    if method == "none":
        return values.copy()
    if method == "z_score":
        return values * params["std"] + params["mean"]
    if method == "sum_divide":
        return values * params["sum"]
    if method == "minmax":
        return values * (params["max"] - params["min"]) + params["min"]
    raise ContractError(f"unknown standardisation {method!r}")


def derive_time_features(dataset: StreamDataset, features: dict, fit_indices=None) -> StreamDataset:
    """Compute and standardise time features.

    ``features`` maps a feature name to either a standardisation name or a
    dict with keys ``standardize``, ``in_path`` and ``in_input``. Statistics
    are fitted on ``fit_indices`` (all records when omitted).
    """
    new_values = dict(dataset.features)
    infos = [f for f in dataset.feature_info if f.name not in features]
    for name, opts in features.items():
        if isinstance(opts, str):
            opts = {"standardize": opts}
        method = opts.get("standardize", "none") or "none"
        raw = raw_time_feature(dataset, name)
        fit = raw if fit_indices is None else raw[np.asarray(fit_indices)]
        params = fit_standardization(fit, method, name)
        new_values[name] = apply_standardization(raw, method, params)
        infos.append(
            FeatureInfo(
                name=name,
                standardize=method,
                in_path=bool(opts.get("in_path", True)),
                in_input=bool(opts.get("in_input", False)),
                params=params,
            )
        )
    return dataset.replace(features=new_values, feature_info=tuple(infos))
