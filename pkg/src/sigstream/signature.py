"""Truncated signatures and log-signatures of piecewise-linear paths.

Layout of every flattened output: levels ascending, and within level ``k`` the
word ``(i1, ..., ik)`` sits at row-major position ``i1*c**(k-1) + ... + ik``
(letters are 0-based). Log-signature coordinates are the coefficients of the
truncated tensor logarithm read at the Lyndon words, ordered by
``(length, lexicographic)``.

The differentiable entry points take and return :class:`~sigstream.autodiff.Tensor`
objects with arbitrary leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import _kernels
from .autodiff import Tensor, as_tensor, custom, take
from .errors import ContractError, DomainError, ShapeError

# -- channel counts -------------------------------------------------------------


def _check_cn(c: int, depth: int) -> None:
    if int(c) != c or int(depth) != depth or c < 1 or depth < 1:
        raise ContractError(f"need channels >= 1 and depth >= 1, got c={c}, depth={depth}")


def sig_channels(c: int, depth: int) -> int:
    _check_cn(c, depth)
    return sum(c**k for k in range(1, depth + 1))


def _mobius(n: int) -> int:
    result, p = 1, 2
    while p * p <= n:
        if n % p == 0:
            n //= p
            if n % p == 0:
                return 0
            result = -result
        p += 1
    return -result if n > 1 else result


def logsig_channels(c: int, depth: int) -> int:
    """Number of Lyndon words of length <= depth over ``c`` letters (Witt's formula)."""
    _check_cn(c, depth)
    total = 0
    for k in range(1, depth + 1):
        total += sum(_mobius(d) * c ** (k // d) for d in range(1, k + 1) if k % d == 0) // k
    return total


# -- Lyndon basis -----------------------------------------------------------


def _duval(c: int, depth: int):
    """Yield Lyndon words of length <= depth in lexicographic order (Duval 1988)."""
    w = [-1]
    while w:
        w[-1] += 1
        yield tuple(w)
        m = len(w)
        while len(w) < depth:
            w.append(w[len(w) - m])
        while w and w[-1] == c - 1:
            w.pop()


def is_lyndon(word: Sequence[int]) -> bool:
    word = tuple(word)
    return len(word) > 0 and all(word < word[i:] + word[:i] for i in range(1, len(word)))


@dataclass(frozen=True)
class LyndonBasis:
    channels: int
    depth: int
    words: tuple[tuple[int, ...], ...] = field(repr=False)

    @classmethod
    def build(cls, channels: int, depth: int) -> "LyndonBasis":
        _check_cn(channels, depth)
        return _lyndon_basis(channels, depth)

    def __len__(self) -> int:
        return len(self.words)

    @property
    def indices(self) -> np.ndarray:
        """Positions of the basis words in the flattened levels-1..N layout."""
        return _lyndon_indices(self.channels, self.depth)

    def labels(self) -> list[str]:
        """1-based human-readable labels, e.g. ``'1,2'`` for the word (0, 1)."""
        return [",".join(str(i + 1) for i in w) for w in self.words]


@lru_cache(maxsize=None)
def _lyndon_basis(c: int, depth: int) -> LyndonBasis:
    words = sorted(_duval(c, depth), key=lambda w: (len(w), w))
    return LyndonBasis(c, depth, tuple(words))


@lru_cache(maxsize=None)
def _lyndon_indices(c: int, depth: int) -> np.ndarray:
    offsets, _ = _kernels.level_layout(c, depth)
    idx = []
    for w in _lyndon_basis(c, depth).words:
        pos = 0
        for letter in w:
            pos = pos * c + letter
        idx.append(offsets[len(w)] - 1 + pos)
    arr = np.array(idx, dtype=np.intp)
    arr.flags.writeable = False
    return arr


# -- specs & truncated tensors -------------------------------------------------


@dataclass(frozen=True)
class SignatureSpec:
    channels: int
    depth: int
    log_mode: bool = False

    def __post_init__(self):
        _check_cn(self.channels, self.depth)

    @property
    def out_channels(self) -> int:
        if self.log_mode:
            return logsig_channels(self.channels, self.depth)
        return sig_channels(self.channels, self.depth)


@lru_cache(maxsize=None)
def _layout(c: int, depth: int):
    offsets, sizes = _kernels.level_layout(c, depth)
    offsets.flags.writeable = False
    sizes.flags.writeable = False
    return offsets, sizes


@dataclass
class TruncatedTensor:
    """Element of the truncated tensor algebra with scalar part ``scalar``."""

    channels: int
    depth: int
    levels: list[np.ndarray]
    scalar: float = 1.0

    def __post_init__(self):
        if len(self.levels) != self.depth:
            raise ContractError(f"expected {self.depth} levels, got {len(self.levels)}")
        self.levels = [np.asarray(lv, dtype=np.float64).reshape(-1) for lv in self.levels]
        for k, lv in enumerate(self.levels, start=1):
            if lv.size != self.channels**k:
                raise ShapeError(f"level {k} needs {self.channels ** k} entries, got {lv.size}")

    @classmethod
    def identity(cls, channels: int, depth: int) -> "TruncatedTensor":
        return cls(channels, depth, [np.zeros(channels**k) for k in range(1, depth + 1)])

    @classmethod
    def from_flat(cls, channels: int, depth: int, flat, scalar: float = 1.0) -> "TruncatedTensor":
        flat = np.asarray(flat, dtype=np.float64)
        offsets, sizes = _layout(channels, depth)
        if flat.size != int(offsets[-1] + sizes[-1]) - 1:
            raise ShapeError(f"flat tensor of length {flat.size} does not match c={channels}, depth={depth}")
        return cls(channels, depth, [flat[offsets[k] - 1 : offsets[k] - 1 + sizes[k]] for k in range(1, depth + 1)], scalar)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.levels)

    def _full(self) -> np.ndarray:
        return np.concatenate([[self.scalar], *self.levels])[None, :]


def _check_pair(a: TruncatedTensor, b: TruncatedTensor) -> None:
    if a.channels != b.channels or a.depth != b.depth:
        raise ContractError(f"mismatched algebras: (c={a.channels}, N={a.depth}) vs (c={b.channels}, N={b.depth})")


def tensor_mul(a: TruncatedTensor, b: TruncatedTensor, depth: int | None = None) -> TruncatedTensor:
    _check_pair(a, b)
    if depth is not None and depth != a.depth:
        raise ContractError(f"depth {depth} does not match operands' depth {a.depth}")
    offsets, sizes = _layout(a.channels, a.depth)
    out = _kernels.tmul(a._full(), b._full(), a.depth, offsets, sizes)[0]
    return TruncatedTensor.from_flat(a.channels, a.depth, out[1:], scalar=out[0])


def tensor_exp(increment, depth: int) -> TruncatedTensor:
    x = np.asarray(increment, dtype=np.float64).reshape(1, -1)
    offsets, sizes = _layout(x.shape[1], depth)
    out = _kernels.texp(x, depth, offsets, sizes)[0]
    return TruncatedTensor.from_flat(x.shape[1], depth, out[1:])


def tensor_log(t: TruncatedTensor) -> TruncatedTensor:
    """Truncated logarithm; the scalar part must be 1."""
    if t.scalar != 1.0:
        raise DomainError("tensor_log is defined here only for tensors with scalar part 1")
    offsets, sizes = _layout(t.channels, t.depth)
    out, _ = _kernels.log_series(t._full(), t.depth, offsets, sizes)
    return TruncatedTensor.from_flat(t.channels, t.depth, out[0, 1:], scalar=0.0)


# -- differentiable transforms -----------------------------------------------------


def _check_path(path: Tensor) -> None:
    if path.ndim < 2:
        raise ShapeError(f"path must be [..., points, channels], got shape {path.shape}")
    if path.shape[-2] < 2:
        raise ContractError(f"a path needs at least 2 points, got {path.shape[-2]}")
    if path.shape[-1] < 1:
        raise ContractError("a path needs at least 1 channel")


def _raw_expanding(path: Tensor, depth: int, backend=None) -> Tensor:
    """Levels 1..N of every prefix signature: ``[..., m-1, sig_channels]``."""
    lead = path.shape[:-2]
    m, c = path.shape[-2:]
    offsets, sizes = _layout(c, depth)
    x = path.data.reshape(-1, m, c)
    out, state = _kernels.expanding(np.diff(x, axis=1), depth, offsets, sizes, backend)

    def backward(g):
        gx = _kernels.expanding_backward(state, g.reshape(out.shape), depth, offsets, sizes)
        return (gx.reshape(path.shape),)

    return custom(out.reshape(*lead, m - 1, -1), (path,), backward, "expanding_signature")


def tensor_log_levels(levels: Tensor, channels: int, depth: int, backend=None) -> Tensor:
    """Differentiable truncated log of group-like tensors given by levels 1..N."""
    offsets, sizes = _layout(channels, depth)
    D = int(offsets[-1] + sizes[-1])
    if levels.shape[-1] != D - 1:
        raise ShapeError(f"expected last axis {D - 1} for c={channels}, depth={depth}, got {levels.shape[-1]}")
    flat = levels.data.reshape(-1, D - 1)
    full = np.concatenate([np.ones((flat.shape[0], 1)), flat], axis=1)
    out, state = _kernels.log_series(full, depth, offsets, sizes, backend)

    def backward(g):
        gl = np.concatenate([np.zeros((flat.shape[0], 1)), g.reshape(flat.shape)], axis=1)
        gx = _kernels.log_series_backward(state, gl, depth, offsets, sizes)
        return (gx[:, 1:].reshape(levels.shape),)

    return custom(out[:, 1:].reshape(levels.shape), (levels,), backward, "tensor_log")


def expanding_signatures(stream, spec: SignatureSpec | int, log_mode: bool | None = None, backend=None) -> Tensor:
    """Signature (or log-signature) of each prefix ``stream[..., :j+1, :]``, j = 1..m-1.

    Returns ``[..., m-1, spec.out_channels]``. Prefixes are extended one
    increment at a time via Chen's identity.
    """
    stream = as_tensor(stream)
    spec = _as_spec(spec, stream, log_mode)
    _check_path(stream)
    if stream.shape[-1] != spec.channels:
        raise ShapeError(f"stream has {stream.shape[-1]} channels, spec expects {spec.channels}")
    sig = _raw_expanding(stream, spec.depth, backend)
    if not spec.log_mode:
        return sig
    logs = tensor_log_levels(sig, spec.channels, spec.depth, backend)
    return take(logs, _lyndon_indices(spec.channels, spec.depth), axis=-1)


def signature(path, spec: SignatureSpec | int, backend=None) -> Tensor:
    """Truncated signature, levels 1..N flattened: ``[..., sig_channels]``."""
    path = as_tensor(path)
    spec = _as_spec(spec, path, False)
    if spec.log_mode:
        raise ContractError("signature() needs log_mode=False; use log_signature()")
    return expanding_signatures(path, spec, backend=backend)[..., -1, :]


def log_signature(path, spec: SignatureSpec | int, backend=None) -> Tensor:
    """Log-signature in Lyndon-word coordinates: ``[..., logsig_channels]``."""
    path = as_tensor(path)
    spec = _as_spec(spec, path, True)
    if not spec.log_mode:
        raise ContractError("log_signature() needs log_mode=True; use signature()")
    return expanding_signatures(path, spec, backend=backend)[..., -1, :]


def _as_spec(spec, path: Tensor, log_mode) -> SignatureSpec:
    if isinstance(spec, SignatureSpec):
        return spec
    if path.ndim < 1:
        raise ShapeError("path must have a channel axis")
    return SignatureSpec(path.shape[-1], int(spec), bool(log_mode))
