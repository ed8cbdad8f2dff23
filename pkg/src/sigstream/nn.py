"""Differentiable layers, losses and checkpoint I/O built on :mod:`sigstream.autodiff`.

Masks are boolean numpy arrays (True = real position); they are constants of
the graph, never differentiated.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, LoadError, ShapeError
from .prep.data import read_matrix, write_matrix

CLS_INIT_STD = 0.02
LAYER_NORM_EPS = 1e-9


# -- module plumbing ----------------------------------------------------------


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.array(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            arr.flags.writeable = False
            p.data = arr


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return ad.parameter(rng.uniform(-bound, bound, size=shape))


def _mask_column(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise ShapeError(f"mask shape {mask.shape} does not match {tuple(shape)}")
    return mask


# -- dense layers -----------------------------------------------------------------


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.in_features, self.out_features = in_features, out_features
        self.weight = uniform_init(rng, (in_features, out_features), in_features)
        self.bias = ad.parameter(np.zeros(out_features)) if bias else None

    def forward(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects last axis {self.in_features}, got shape {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` in training."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    x = ad.as_tensor(x)
    if not training or rate == 0.0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x) -> Tensor:
        return dropout(x, self.rate, self.training, self.rng)


def layer_norm(x, eps: float = LAYER_NORM_EPS) -> Tensor:
    x = ad.as_tensor(x)
    centred = x - x.mean(axis=-1, keepdims=True)
    var = (centred * centred).mean(axis=-1, keepdims=True)
    return centred * ad.pow_scalar(var + eps, -0.5)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = LAYER_NORM_EPS):
        self.eps = eps
        self.gamma = ad.parameter(np.ones(dim))
        self.beta = ad.parameter(np.zeros(dim))

    def forward(self, x) -> Tensor:
        return layer_norm(x, self.eps) * self.gamma + self.beta


# -- convolution -------------------------------------------------------------------


class Conv1d(Module):
    """Length-preserving 1-D convolution over the time axis of ``[b, m, c_in]``.

    Masked input rows are zeroed before convolving and masked output rows
    after, so padding content never leaks into real positions.
    """

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, kernel_size: int = 3):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ContractError(f"kernel size must be odd and positive, got {kernel_size}")
        self.in_channels, self.out_channels, self.kernel_size = in_channels, out_channels, kernel_size
        fan_in = in_channels * kernel_size
        self.weight = uniform_init(rng, (kernel_size * in_channels, out_channels), fan_in)
        self.bias = ad.parameter(np.zeros(out_channels))

    def forward(self, x, mask=None) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.in_channels:
            raise ShapeError(f"Conv1d expects [b, m, {self.in_channels}], got {x.shape}")
        b, m, c = x.shape
        mask = _mask_column(mask, (b, m))
        if mask is not None:
            x = x * mask[..., None]
        half = self.kernel_size // 2
        if half:
            pad = ad.zeros((b, half, c))
            xp = ad.concat([pad, x, pad], axis=1)
            cols = ad.concat([xp[:, i : i + m] for i in range(self.kernel_size)], axis=-1)
        else:
            cols = x
        y = cols @ self.weight + self.bias
        if mask is not None:
            y = y * mask[..., None]
        return y


class CNN(Module):
    """Stack of length-preserving convolutions with ReLU between layers."""

    def __init__(self, in_channels: int, hidden: list[int], out_channels: int, rng: np.random.Generator, kernel_size: int = 3):
        dims = [in_channels, *hidden, out_channels]
        self.layers = [Conv1d(dims[i], dims[i + 1], rng, kernel_size) for i in range(len(dims) - 1)]

    def forward(self, x, mask=None) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x, mask)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


# -- recurrence ----------------------------------------------------------------------


class _LSTMDirection(Module):
    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        h = hidden_dim
        self.w_ih = uniform_init(rng, (input_dim, 4 * h), h)
        self.w_hh = uniform_init(rng, (h, 4 * h), h)
        bias = np.zeros(4 * h)
        bias[h : 2 * h] = 1.0  # forget gate
        self.bias = ad.parameter(bias)
        self.hidden_dim = h

    def run(self, x: Tensor, mask: np.ndarray | None, reverse: bool):
        b, m, _ = x.shape
        h_dim = self.hidden_dim
        xw = x @ self.w_ih + self.bias
        h = ad.zeros((b, h_dim))
        c = ad.zeros((b, h_dim))
        outs: list[Tensor | None] = [None] * m
        steps = range(m - 1, -1, -1) if reverse else range(m)
        for t in steps:
            gates = xw[:, t] + h @ self.w_hh
            i = ad.sigmoid(gates[:, :h_dim])
            f = ad.sigmoid(gates[:, h_dim : 2 * h_dim])
            g = ad.tanh(gates[:, 2 * h_dim : 3 * h_dim])
            o = ad.sigmoid(gates[:, 3 * h_dim :])
            c_new = f * c + i * g
            h_new = o * ad.tanh(c_new)
            if mask is not None and not mask[:, t].all():
                keep = mask[:, t : t + 1]
                if keep.any():
                    c = ad.where(keep, c_new, c)
                    h = ad.where(keep, h_new, h)
            else:
                c, h = c_new, h_new
            outs[t] = h
        return ad.stack(outs, axis=1), h


class LSTM(Module):
    """Single-layer (Bi)LSTM over ``[b, m, d]`` with gate order (i, f, g, o).

    Masked steps carry the previous state unchanged. ``final`` is the forward
    state after the last real step, concatenated (bidirectional) with the
    backward state after the first real step.
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator, bidirectional: bool = False):
        self.input_dim, self.hidden_dim, self.bidirectional = input_dim, hidden_dim, bidirectional
        self.fwd = _LSTMDirection(input_dim, hidden_dim, rng)
        self.bwd = _LSTMDirection(input_dim, hidden_dim, rng) if bidirectional else None

    @property
    def output_dim(self) -> int:
        return self.hidden_dim * (2 if self.bidirectional else 1)

    def forward(self, x, mask=None) -> tuple[Tensor, Tensor]:
        x = ad.as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.input_dim:
            raise ShapeError(f"LSTM expects [b, m, {self.input_dim}], got {x.shape}")
        if x.shape[1] < 1:
            raise ContractError("LSTM needs at least one step")
        mask = _mask_column(mask, x.shape[:2])
        out_f, fin_f = self.fwd.run(x, mask, reverse=False)
        if self.bwd is None:
            return out_f, fin_f
        out_b, fin_b = self.bwd.run(x, mask, reverse=True)
        return ad.concat([out_f, out_b], axis=-1), ad.concat([fin_f, fin_b], axis=-1)


# -- attention ---------------------------------------------------------------------------


def check_heads(dim: int, num_heads: int) -> None:
    if num_heads < 1 or dim % num_heads:
        raise ConfigError(f"attention width {dim} is not divisible by num_heads={num_heads}")


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, dropout_rate: float = 0.0):
        check_heads(dim, num_heads)
        self.dim, self.num_heads = dim, num_heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.drop = Dropout(dropout_rate, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, m, _ = x.shape
        return x.reshape(b, m, self.num_heads, self.dim // self.num_heads).transpose(0, 2, 1, 3)

    def forward(self, x, mask=None) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeError(f"attention expects [b, m, {self.dim}], got {x.shape}")
        b, m, _ = x.shape
        mask = _mask_column(mask, (b, m))
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(self.dim // self.num_heads))
        key_mask = None if mask is None else mask[:, None, None, :]
        weights = ad.softmax(scores, axis=-1, mask=key_mask)
        self.last_weights = weights.data
        ctx = self.drop(weights) @ v
        return self.out(ctx.transpose(0, 2, 1, 3).reshape(b, m, self.dim))


class SWAttnBlock(Module):
    """Self-attention, residual add & layer norm, then a position-wise linear map."""

    def __init__(self, dim: int, out_dim: int, num_heads: int, rng: np.random.Generator, dropout_rate: float = 0.0):
        self.attn = MultiHeadSelfAttention(dim, num_heads, rng, dropout_rate)
        self.norm = LayerNorm(dim)
        self.linear = Linear(dim, out_dim, rng)

    def forward(self, x, mask=None) -> Tensor:
        return self.linear(self.norm(x + self.attn(x, mask)))


class EncoderLayer(Module):
    """Post-norm transformer encoder layer."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, ff_dim: int | None = None, dropout_rate: float = 0.0):
        ff_dim = ff_dim or dim
        self.attn = MultiHeadSelfAttention(dim, num_heads, rng, dropout_rate)
        self.norm1 = LayerNorm(dim)
        self.ff1 = Linear(dim, ff_dim, rng)
        self.ff2 = Linear(ff_dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.drop = Dropout(dropout_rate, rng)

    def forward(self, x, mask=None) -> Tensor:
        x = self.norm1(x + self.drop(self.attn(x, mask)))
        return self.norm2(x + self.drop(self.ff2(ad.relu(self.ff1(x)))))


class CLSEncoder(Module):
    """Learnable position embeddings + [CLS] token + encoder stack; returns the CLS state."""

    def __init__(self, dim: int, num_positions: int, num_layers: int, num_heads: int, rng: np.random.Generator, dropout_rate: float = 0.0):
        check_heads(dim, num_heads)
        self.cls = ad.parameter(rng.normal(0.0, CLS_INIT_STD, size=dim))
        self.positions = ad.parameter(rng.normal(0.0, CLS_INIT_STD, size=(num_positions, dim)))
        self.layers = [EncoderLayer(dim, num_heads, rng, dropout_rate=dropout_rate) for _ in range(num_layers)]

    def forward(self, x, mask=None) -> Tensor:
        x = ad.as_tensor(x)
        b, n, d = x.shape
        if n > self.positions.shape[0]:
            raise ShapeError(f"{n} positions exceed the {self.positions.shape[0]} learned embeddings")
        # align to the most recent position so earlier padded units never shift real ones
        x = x + self.positions[self.positions.shape[0] - n :]
        cls = self.cls.reshape(1, 1, d) + ad.zeros((b, 1, d))
        h = ad.concat([cls, x], axis=1)
        full_mask = None
        if mask is not None:
            full_mask = np.concatenate([np.ones((b, 1), dtype=bool), np.asarray(mask, dtype=bool)], axis=1)
        for layer in self.layers:
            h = layer(h, full_mask)
        return h[:, 0]


class FeedForwardHead(Module):
    def __init__(self, in_dim: int, hidden: list[int], num_classes: int, rng: np.random.Generator, dropout_rate: float = 0.1):
        if not hidden or any(h < 1 for h in hidden):
            raise ConfigError(f"head needs at least one positive hidden size, got {hidden}")
        dims = [in_dim, *hidden]
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(len(hidden))]
        self.out = Linear(dims[-1], num_classes, rng)
        self.drop = Dropout(dropout_rate, rng)

    def forward(self, x) -> Tensor:
        for layer in self.layers:
            x = self.drop(ad.relu(layer(x)))
        return self.out(x)


# -- losses ----------------------------------------------------------------------------------


@dataclass(frozen=True)
class FocalLossSpec:
    gamma: float
    alpha: tuple[float, ...]

    def __post_init__(self):
        if any(a <= 0 for a in self.alpha):
            raise ContractError("focal loss alpha entries must be positive")
        if self.gamma < 0:
            raise ContractError("focal loss gamma must be non-negative")

    @property
    def num_classes(self) -> int:
        return len(self.alpha)

    @classmethod
    def uniform(cls, num_classes: int, gamma: float = 2.0) -> "FocalLossSpec":
        return cls(gamma, (1.0,) * num_classes)

    @classmethod
    def from_frequencies(cls, freqs, gamma: float = 2.0) -> "FocalLossSpec":
        freqs = np.asarray(freqs, dtype=np.float64)
        if np.any(freqs <= 0):
            raise ContractError("class frequencies must be positive")
        return cls(gamma, tuple(float(a) for a in np.sqrt(1.0 / freqs)))

    @classmethod
    def from_labels(cls, labels, num_classes: int, gamma: float = 2.0) -> "FocalLossSpec":
        """alpha_t = sqrt(1 / p_t) with p_t the training frequency; unseen classes use p = 1/len(labels)."""
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size == 0:
            raise ContractError("cannot fit class frequencies from no labels")
        counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
        counts[counts == 0] = 1.0
        return cls.from_frequencies(counts / labels.size, gamma)


def _check_logits(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [batch, classes], got {logits.shape}")
    if logits.shape[0] == 0:
        raise ContractError("loss over an empty batch")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ContractError(f"labels must lie in [0, {logits.shape[1]})")
    return labels


def cross_entropy(logits, labels) -> Tensor:
    logits = ad.as_tensor(logits)
    labels = _check_logits(logits, labels)
    logp = ad.log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    return -picked.mean()


def focal_loss(logits, labels, spec: FocalLossSpec) -> Tensor:
    """Mean of ``-alpha_y (1 - p_y)**gamma log p_y`` with ``p = softmax(logits)``."""
    logits = ad.as_tensor(logits)
    labels = _check_logits(logits, labels)
    if spec.num_classes != logits.shape[1]:
        raise ShapeError(f"focal spec has {spec.num_classes} classes, logits have {logits.shape[1]}")
    logp = ad.log_softmax(logits, axis=-1)
    logp_y = logp[np.arange(len(labels)), labels]
    alpha = np.asarray(spec.alpha)[labels]
    per = logp_y * alpha
    if spec.gamma != 0:
        # 1 - p_y can round to exactly 0 for confident rows; clamp keeps the power differentiable
        one_minus = 1.0 - ad.exp(logp_y)
        safe = ad.where(one_minus.data > 1e-300, one_minus, 1e-300)
        per = per * ad.pow_scalar(safe, spec.gamma)
    return -per.mean()


# -- checkpoints ---------------------------------------------------------------------------------


def save_checkpoint(module: Module, path) -> None:
    """Write parameters to an SGEM v2 container plus a ``.json`` sidecar index."""
    path = Path(path)
    names, flats, index, offset = [], [], {}, 0
    for name, p in module.named_parameters():
        names.append(name)
        flats.append(p.data.reshape(-1))
        index[name] = {"offset": offset, "shape": list(p.shape)}
        offset += p.size
    write_matrix(path, np.concatenate(flats)[None, :] if flats else np.zeros((1, 0)), version=2)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps({"format": "sgem-checkpoint", "version": 1, "parameters": index}, indent=2, sort_keys=True))


def load_checkpoint(module: Module, path) -> None:
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    try:
        meta = json.loads(sidecar.read_text())
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint index {sidecar}: {exc.strerror}") from None
    flat = read_matrix(path).reshape(-1)
    state = {}
    for name, entry in meta["parameters"].items():
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        state[name] = flat[entry["offset"] : entry["offset"] + size].reshape(entry["shape"])
    module.load_state_dict(state)
