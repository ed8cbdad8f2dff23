"""Signature network models and baselines.

Every model maps a :class:`~sigstream.prep.history.HistoryBatch` to logits
``[B, K]``. Padded history rows are neutral: inputs at padded positions are
zeroed, the padded prefix of every stream is replaced by its first real row
(zero-length increments) before any signature is taken, and recurrences and
attention ignore padded steps.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DegenerateInputError, ShapeError
from .prep.history import HistoryBatch
from .signature import SignatureSpec, expanding_signatures, logsig_channels, sig_channels

CONFIG_SCHEMA_VERSION = 1

FAMILIES = ("ffn", "ffn_history", "bilstm", "swnu", "swattn", "seq_sig_net", "swattn_bilstm", "swattn_encoder")
UNIT_FAMILIES = ("seq_sig_net", "swattn_bilstm", "swattn_encoder")
WINDOW_FAMILIES = ("ffn", "ffn_history", "bilstm", "swnu", "swattn")
POOLINGS = ("signature", "last-hidden")
RECURRENCES = ("lstm", "bilstm", "attention")
AUGMENTATIONS = ("conv1d", "cnn")

_ATTENTION_FAMILIES = ("swattn", "swattn_bilstm", "swattn_encoder")
_RECURRENT_UNIT_FAMILIES = ("swnu", "seq_sig_net")


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class UnitConfig:
    output_channels: int = 10
    depth: int = 3
    log_signature: bool = True
    pooling: str = "signature"
    reverse_path: bool = False
    recurrence: str = "bilstm"
    hidden_dim: int = 10
    num_heads: int = 5
    num_layers: int = 1
    dropout: float = 0.1
    augmentation: str = "conv1d"
    cnn_hidden: tuple[int, ...] = ()
    input_channels: int | None = None

    @property
    def sig_spec(self) -> SignatureSpec:
        return SignatureSpec(self.output_channels, self.depth, self.log_signature)

    @property
    def stream_width(self) -> int:
        """Channels of the expanding-signature stream."""
        return self.sig_spec.out_channels

    @property
    def pooled_channels(self) -> int:
        """Width of the stream that signature pooling consumes."""
        if self.recurrence == "attention":
            return self.output_channels
        return self.hidden_dim * (2 if self.recurrence == "bilstm" else 1)

    @property
    def output_dim(self) -> int:
        if self.pooling == "last-hidden":
            return self.pooled_channels
        count = logsig_channels if self.log_signature else sig_channels
        return count(self.pooled_channels, self.depth)

    def validate(self) -> None:
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.recurrence not in RECURRENCES:
            raise ConfigError(f"recurrence must be one of {RECURRENCES}, got {self.recurrence!r}")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"augmentation must be one of {AUGMENTATIONS}, got {self.augmentation!r}")
        for name in ("output_channels", "depth", "hidden_dim", "num_heads", "num_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"unit {name} must be >= 1, got {getattr(self, name)}")
        if any(h < 1 for h in self.cnn_hidden):
            raise ConfigError(f"cnn hidden sizes must be positive, got {self.cnn_hidden}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"unit dropout must be in [0, 1), got {self.dropout}")
        if self.recurrence == "attention":
            nn.check_heads(self.stream_width, self.num_heads)
        elif self.pooling == "signature" and self.output_channels != self.hidden_dim:
            raise ConfigError(
                f"signature pooling needs conv output_channels == hidden_dim, got {self.output_channels} and {self.hidden_dim}"
            )


@dataclass(frozen=True)
class AggregatorConfig:
    kind: str = "bilstm"
    hidden_dim: int = 300
    num_layers: int = 2
    num_heads: int = 5
    dropout: float = 0.1

    def validate(self) -> None:
        if self.kind not in ("bilstm", "encoder"):
            raise ConfigError(f"aggregator must be 'bilstm' or 'encoder', got {self.kind!r}")
        if min(self.hidden_dim, self.num_layers, self.num_heads) < 1:
            raise ConfigError("aggregator sizes must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"aggregator dropout must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class HeadConfig:
    hidden: tuple[int, ...] = (32, 32)
    dropout: float = 0.1
    num_classes: int = 2
    include_external: bool = True

    def validate(self) -> None:
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError(f"head needs >= 1 positive hidden size, got {list(self.hidden)}")
        if self.num_classes < 2:
            raise ConfigError(f"need >= 2 classes, got {self.num_classes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"head dropout must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class ModelConfig:
    family: str
    head: HeadConfig = field(default_factory=HeadConfig)
    unit: UnitConfig | None = None
    aggregator: AggregatorConfig | None = None
    w: int = 5
    k: int = 3
    n: int = 3
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def input_mode(self) -> str:
        return "unit" if self.family in UNIT_FAMILIES else "window"

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        self.head.validate()
        if self.w < 2 or self.k < 1 or self.n < 1 or self.k > self.w:
            raise ConfigError(f"invalid history shape w={self.w}, k={self.k}, n={self.n}")
        needs_unit = self.family in ("swnu", "swattn", *UNIT_FAMILIES)
        if needs_unit:
            if self.unit is None:
                raise ConfigError(f"family {self.family!r} needs a unit config")
            self.unit.validate()
            attn = self.unit.recurrence == "attention"
            if self.family in _ATTENTION_FAMILIES and not attn:
                raise ConfigError(f"family {self.family!r} needs recurrence='attention'")
            if self.family in _RECURRENT_UNIT_FAMILIES and attn:
                raise ConfigError(f"family {self.family!r} needs an lstm/bilstm unit")
        elif self.unit is not None:
            raise ConfigError(f"family {self.family!r} takes no unit config")
        if self.family in UNIT_FAMILIES or self.family == "bilstm":
            if self.aggregator is None:
                raise ConfigError(f"family {self.family!r} needs an aggregator config")
            self.aggregator.validate()
            want = "encoder" if self.family == "swattn_encoder" else "bilstm"
            if self.aggregator.kind != want:
                raise ConfigError(f"family {self.family!r} needs aggregator {want!r}, got {self.aggregator.kind!r}")
            if want == "encoder":
                nn.check_heads(self.unit.output_dim, self.aggregator.num_heads)
        elif self.aggregator is not None:
            raise ConfigError(f"family {self.family!r} takes no aggregator config")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = CONFIG_SCHEMA_VERSION
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        version = d.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported model config schema version {version}")
        try:
            head = _sub(HeadConfig, d.pop("head", {}))
            unit = _sub(UnitConfig, d.pop("unit")) if d.get("unit") is not None else d.pop("unit", None)
            agg = _sub(AggregatorConfig, d.pop("aggregator")) if d.get("aggregator") is not None else d.pop("aggregator", None)
            _check_keys(cls, d, skip=("head", "unit", "aggregator"))
            return cls(head=head, unit=unit, aggregator=agg, **d)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

    def with_overrides(self, overrides: dict) -> "ModelConfig":
        """Apply dotted-key overrides, e.g. ``{"unit.hidden_dim": 12, "head.hidden": [64, 64]}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            target = d
            *path, leaf = key.split(".")
            for part in path:
                if target.get(part) is None:
                    raise ConfigError(f"override {key!r}: {part!r} is not set on this config")
                target = target[part]
            if leaf not in target:
                raise ConfigError(f"override {key!r}: unknown field {leaf!r}")
            target[leaf] = value
        return ModelConfig.from_dict(d)


def _check_keys(cls, d: dict, skip=()) -> None:
    known = {f.name for f in fields(cls)} - set(skip)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")


def _sub(cls, d):
    if isinstance(d, cls):
        return d
    d = dict(d)
    _check_keys(cls, d)
    for f in fields(cls):
        if f.name in d and isinstance(d[f.name], list):
            d[f.name] = tuple(d[f.name])
    return cls(**d)


@dataclass(frozen=True)
class InputDims:
    path_channels: int
    embedding_dim: int
    extra_dim: int = 0

    @classmethod
    def from_batch(cls, batch: HistoryBatch) -> "InputDims":
        return cls(batch.path_channels, batch.embedding_dim, batch.current.shape[1] - batch.embedding_dim)


# -- masking helpers ----------------------------------------------------------------


def _check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise DegenerateInputError("degenerate input: a stream has no real points")
    return mask


def reverse_real(x, mask) -> Tensor:
    """Reverse the time order of the real (unmasked) rows, leaving padded slots in place."""
    x = ad.as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    b, m = mask.shape
    idx = np.tile(np.arange(m), (b, 1))
    for i in range(b):
        real = np.flatnonzero(mask[i])
        idx[i, real] = real[::-1]
    return x[np.arange(b)[:, None], idx]


def fill_pads(x, mask) -> Tensor:
    """Replace every padded row by the nearest earlier real row, or the first real row for a padded prefix."""
    x = ad.as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.all():
        return x
    b, m = mask.shape
    idx = np.where(mask, np.arange(m), -1)
    idx = np.maximum.accumulate(idx, axis=1)
    first = mask.argmax(axis=1)
    idx = np.where(idx < 0, first[:, None], idx)
    return x[np.arange(b)[:, None], idx]


def last_real(x, mask) -> Tensor:
    x = ad.as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    m = mask.shape[1]
    last = m - 1 - mask[:, ::-1].argmax(axis=1)
    return x[np.arange(mask.shape[0]), last]


def expanding_with_start(x, spec: SignatureSpec) -> Tensor:
    """Row t holds the (log-)signature of rows ``0..t``; row 0 is the zero signature of a single point."""
    x = ad.as_tensor(x)
    sig = expanding_signatures(x, spec)
    start = ad.zeros(x.shape[:-2] + (1, spec.out_channels))
    return ad.concat([start, sig], axis=-2)


# -- units --------------------------------------------------------------------------------


class SignatureUnit(nn.Module):
    """SWNU (recurrence lstm/bilstm) or SW-Attn (recurrence attention) over ``[b, w, c]`` streams."""

    def __init__(self, cfg: UnitConfig, in_channels: int, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.in_channels = in_channels
        if cfg.augmentation == "conv1d":
            self.augment = nn.Conv1d(in_channels, cfg.output_channels, rng)
        else:
            self.augment = nn.CNN(in_channels, list(cfg.cnn_hidden), cfg.output_channels, rng)
        self.spec = cfg.sig_spec
        if cfg.recurrence == "attention":
            self.blocks = [
                nn.SWAttnBlock(cfg.stream_width, cfg.output_channels, cfg.num_heads, rng, cfg.dropout)
                for _ in range(cfg.num_layers)
            ]
            self.lstm = None
        else:
            self.blocks = []
            self.lstm = nn.LSTM(cfg.stream_width, cfg.hidden_dim, rng, bidirectional=cfg.recurrence == "bilstm")
        self.pool_spec = SignatureSpec(cfg.pooled_channels, cfg.depth, cfg.log_signature)

    @property
    def output_dim(self) -> int:
        return self.cfg.output_dim

    def forward(self, x, mask) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.in_channels:
            raise ShapeError(f"unit expects [b, w, {self.in_channels}], got {x.shape}")
        if x.shape[1] < 2:
            raise ContractError(f"unit streams need >= 2 positions, got {x.shape[1]}")
        mask = _check_mask(mask)
        x = x * mask[..., None]
        if self.cfg.reverse_path:
            x = reverse_real(x, mask)
        h = fill_pads(self.augment(x, mask), mask)
        if self.lstm is not None:
            out, final = self.lstm(expanding_with_start(h, self.spec), mask)
            if self.cfg.pooling == "last-hidden":
                return final
            h = out
        else:
            for block in self.blocks:
                h = fill_pads(block(expanding_with_start(h, self.spec), mask), mask)
            if self.cfg.pooling == "last-hidden":
                return last_real(h, mask)
        return expanding_signatures(fill_pads(h, mask), self.pool_spec)[:, -1]


# -- models -------------------------------------------------------------------------------


class StreamModel(nn.Module):
    input_mode = "window"

    def __init__(self, cfg: ModelConfig, dims: InputDims, rng: np.random.Generator):
        self.cfg = cfg
        self.dims = dims

    def _head_features(self, batch: HistoryBatch) -> np.ndarray:
        cur = batch.current
        if cur.shape[1] != self.dims.embedding_dim + self.dims.extra_dim:
            raise ShapeError(f"current features have width {cur.shape[1]}, model expects {self.dims.embedding_dim + self.dims.extra_dim}")
        return cur if self.cfg.head.include_external else cur[:, : self.dims.embedding_dim]

    def _head_width(self) -> int:
        return self.dims.embedding_dim + (self.dims.extra_dim if self.cfg.head.include_external else 0)

    def _make_head(self, in_dim: int, rng) -> nn.FeedForwardHead:
        h = self.cfg.head
        return nn.FeedForwardHead(in_dim, list(h.hidden), h.num_classes, rng, h.dropout)

    def _check_batch(self, batch: HistoryBatch) -> None:
        if batch.mode != self.input_mode:
            raise ContractError(f"{self.cfg.family} needs a {self.input_mode}-mode batch, got {batch.mode!r}")


class FFN(StreamModel):
    def __init__(self, cfg, dims, rng):
        super().__init__(cfg, dims, rng)
        self.head = self._make_head(self._head_width(), rng)

    def forward(self, batch: HistoryBatch) -> Tensor:
        self._check_batch(batch)
        return self.head(ad.as_tensor(self._head_features(batch)))


class FFNHistory(StreamModel):
    """Head over ``[mean of real window embeddings | current features]``."""

    def __init__(self, cfg, dims, rng):
        super().__init__(cfg, dims, rng)
        self.head = self._make_head(dims.embedding_dim + self._head_width(), rng)

    def forward(self, batch: HistoryBatch) -> Tensor:
        self._check_batch(batch)
        cur = self._head_features(batch)
        mask = batch.pad_mask.astype(np.float64)
        counts = mask.sum(axis=1, keepdims=True)
        summed = (batch.full * mask[..., None]).sum(axis=1)
        # no real history: fall back to the current point alone
        mean = np.where(counts > 0, summed / np.maximum(counts, 1.0), batch.current[:, : self.dims.embedding_dim])
        return self.head(ad.as_tensor(np.concatenate([mean, cur], axis=1)))


class BiLSTMBaseline(StreamModel):
    """Single-layer BiLSTM over the window of full embeddings; head gets the final state and in-input features."""

    def __init__(self, cfg, dims, rng):
        super().__init__(cfg, dims, rng)
        self.lstm = nn.LSTM(dims.embedding_dim, cfg.aggregator.hidden_dim, rng, bidirectional=True)
        extra = dims.extra_dim if cfg.head.include_external else 0
        self.head = self._make_head(self.lstm.output_dim + extra, rng)

    def forward(self, batch: HistoryBatch) -> Tensor:
        self._check_batch(batch)
        mask = _check_mask(batch.pad_mask)
        x = ad.as_tensor(batch.full * mask[..., None])
        _, final = self.lstm(x, mask)
        extra = self._head_features(batch)[:, self.dims.embedding_dim :]
        return self.head(ad.concat([final, ad.as_tensor(extra)], axis=1))


class WindowSignatureModel(StreamModel):
    """SWNU or SW-Attn applied to the window of path features."""

    def __init__(self, cfg, dims, rng):
        super().__init__(cfg, dims, rng)
        self.unit = SignatureUnit(cfg.unit, dims.path_channels, rng)
        self.head = self._make_head(self.unit.output_dim + self._head_width(), rng)

    def forward(self, batch: HistoryBatch) -> Tensor:
        self._check_batch(batch)
        rep = self.unit(batch.points, batch.pad_mask)
        return self.head(ad.concat([rep, ad.as_tensor(self._head_features(batch))], axis=1))


class SeqSigNet(StreamModel):
    """A shared unit over each of the n shifted windows, aggregated by a BiLSTM or a CLS encoder."""

    input_mode = "unit"

    def __init__(self, cfg, dims, rng):
        super().__init__(cfg, dims, rng)
        self.unit = SignatureUnit(cfg.unit, dims.path_channels, rng)
        agg = cfg.aggregator
        u = self.unit.output_dim
        if agg.kind == "bilstm":
            self.aggregate = nn.LSTM(u, agg.hidden_dim, rng, bidirectional=True)
            rep = self.aggregate.output_dim
        else:
            self.aggregate = nn.CLSEncoder(u, cfg.n, agg.num_layers, agg.num_heads, rng, agg.dropout)
            rep = u
        self.head = self._make_head(rep + self._head_width(), rng)

    def unit_outputs(self, batch: HistoryBatch) -> tuple[Tensor, np.ndarray]:
        """Unit representations ``[B, n, u]`` and the unit mask ``[B, n]``."""
        b, n, w, c = batch.points.shape
        flat_pts = batch.points.reshape(b * n, w, c)
        flat_mask = batch.pad_mask.reshape(b * n, w)
        has_real = flat_mask.any(axis=1)
        live = np.flatnonzero(has_real)
        reps = self.unit(flat_pts[live], flat_mask[live])
        # empty units read a zero row appended after the live outputs
        slot = np.full(b * n, len(live), dtype=np.int64)
        slot[live] = np.arange(len(live))
        padded = ad.concat([reps, ad.zeros((1, reps.shape[1]))], axis=0)
        units = ad.take(padded, slot, axis=0).reshape(b, n, reps.shape[1])
        return units, has_real.reshape(b, n)

    def forward(self, batch: HistoryBatch) -> Tensor:
        self._check_batch(batch)
        units, unit_mask = self.unit_outputs(batch)
        if isinstance(self.aggregate, nn.LSTM):
            _, rep = self.aggregate(units, unit_mask)
        else:
            rep = self.aggregate(units, unit_mask)
        return self.head(ad.concat([rep, ad.as_tensor(self._head_features(batch))], axis=1))


_REGISTRY = {
    "ffn": FFN,
    "ffn_history": FFNHistory,
    "bilstm": BiLSTMBaseline,
    "swnu": WindowSignatureModel,
    "swattn": WindowSignatureModel,
    "seq_sig_net": SeqSigNet,
    "swattn_bilstm": SeqSigNet,
    "swattn_encoder": SeqSigNet,
}


def build_model(cfg: ModelConfig, dims: InputDims) -> StreamModel:
    """Construct a model whose parameters are a pure function of ``(cfg, dims)``."""
    if cfg.unit is not None and cfg.unit.input_channels not in (None, dims.path_channels):
        raise ConfigError(f"unit expects {cfg.unit.input_channels} input channels, data has {dims.path_channels}")
    rng = np.random.default_rng(cfg.seed)
    return _REGISTRY[cfg.family](cfg, dims, rng)


def default_config(family: str, num_classes: int = 2, **kw) -> ModelConfig:
    """A small working configuration for ``family``; ``kw`` overrides top-level fields."""
    unit = agg = None
    if family in ("swnu", "seq_sig_net"):
        unit = UnitConfig(output_channels=10, hidden_dim=10, recurrence="bilstm")
    elif family in _ATTENTION_FAMILIES:
        unit = UnitConfig(output_channels=10, recurrence="attention", num_heads=5)
    if family in ("seq_sig_net", "swattn_bilstm", "bilstm"):
        agg = AggregatorConfig("bilstm", hidden_dim=300)
    elif family == "swattn_encoder":
        agg = AggregatorConfig("encoder", num_layers=2, num_heads=5)
    base = ModelConfig(family, HeadConfig(num_classes=num_classes), unit, agg)
    return replace(base, **kw) if kw else base


def batch_for(cfg: ModelConfig, dataset) -> HistoryBatch:
    from .prep.history import build_unit_input, build_window_input

    if cfg.input_mode == "unit":
        return build_unit_input(dataset, cfg.w, cfg.k, cfg.n)
    return build_window_input(dataset, cfg.w)
