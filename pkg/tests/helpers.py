"""Tiny datasets, per-family model configs and gradient-check fixtures shared across test files."""

from __future__ import annotations

import numpy as np

from sigstream import nn
from sigstream.models import FAMILIES, AggregatorConfig, HeadConfig, InputDims, ModelConfig, UnitConfig, batch_for, build_model
from sigstream.prep.data import dataset_from_arrays


def tiny_dataset(num_streams=4, length=7, channels=3, seed=0, num_classes=2, extras=0):
    rng = np.random.default_rng(seed)
    n = num_streams * length
    ids = np.repeat([f"s{i}" for i in range(num_streams)], length)
    ts = np.tile(np.arange(length) * 60.0, num_streams) + 1.6e9
    ext = rng.normal(size=(n, extras)) if extras else None
    return dataset_from_arrays(
        ids, rng.normal(size=(n, channels)), rng.integers(0, num_classes, n), timestamps=ts, external=ext, num_classes=num_classes
    )


def tiny_config(family: str, seed: int = 0, num_classes: int = 2, w: int = 3, k: int = 2, n: int = 2, depth: int = 2) -> ModelConfig:
    unit = agg = None
    if family in ("swnu", "seq_sig_net"):
        unit = UnitConfig(output_channels=3, depth=depth, hidden_dim=3, recurrence="bilstm", dropout=0.0)
    elif family in ("swattn", "swattn_bilstm", "swattn_encoder"):
        unit = UnitConfig(output_channels=3, depth=depth, recurrence="attention", num_heads=2, dropout=0.0)
    if family in ("seq_sig_net", "swattn_bilstm", "bilstm"):
        agg = AggregatorConfig("bilstm", hidden_dim=4, dropout=0.0)
    elif family == "swattn_encoder":
        agg = AggregatorConfig("encoder", num_layers=1, num_heads=2, dropout=0.0)
    head = HeadConfig(hidden=(5,), dropout=0.0, num_classes=num_classes)
    return ModelConfig(family, head, unit, agg, w=w, k=k, n=n, seed=seed)


def tiny_model(family: str, dataset, seed: int = 0, **kw):
    cfg = tiny_config(family, seed, num_classes=dataset.num_classes, **kw)
    batch = batch_for(cfg, dataset)
    model = build_model(cfg, InputDims.from_batch(batch))
    model.eval()
    return model, batch


def jitter(module, seed: int, scale: float = 0.05) -> None:
    """Perturb every parameter; zero biases would otherwise sit ReLU inputs exactly on the kink."""
    r = np.random.default_rng(seed)
    for p in module.parameters():
        p.data = p.data + scale * r.normal(size=p.shape)


def gradient_blocks(seed: int) -> dict:
    """Every layer type at tiny size, each paired with a call on a ``[2, 4, 4]`` input."""
    r = np.random.default_rng(seed)
    mask = np.ones((2, 4), dtype=bool)
    mask[0, :2] = False
    return {
        "linear": (nn.Linear(4, 3, r), lambda m, x: m(x)),
        "layer_norm": (nn.LayerNorm(4), lambda m, x: m(x)),
        "conv1d": (nn.Conv1d(4, 3, r), lambda m, x: m(x, mask)),
        "cnn": (nn.CNN(4, [5], 3, r), lambda m, x: m(x, mask)),
        "lstm": (nn.LSTM(4, 3, r), lambda m, x: m(x, mask)[0]),
        "bilstm": (nn.LSTM(4, 3, r, bidirectional=True), lambda m, x: m(x, mask)[1]),
        "attention": (nn.MultiHeadSelfAttention(4, 2, r), lambda m, x: m(x, mask)),
        "swattn": (nn.SWAttnBlock(4, 3, 2, r), lambda m, x: m(x, mask)),
        "encoder": (nn.EncoderLayer(4, 2, r), lambda m, x: m(x, mask)),
        "cls_encoder": (nn.CLSEncoder(4, 4, 2, 2, r), lambda m, x: m(x, mask)),
        "head": (nn.FeedForwardHead(4, [5, 3], 2, r, dropout_rate=0.0), lambda m, x: m(x)),
    }


__all__ = ["FAMILIES", "gradient_blocks", "jitter", "tiny_config", "tiny_dataset", "tiny_model"]
