"""Independent reference implementations used by the tests.

Nothing here calls the package's tensor-algebra kernels: signatures are built
from dense nested tensors with ``np.multiply.outer``, Lyndon words by brute
force, gradients by central finite differences.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from sigstream import autodiff as ad


# -- dense truncated tensor algebra -----------------------------------------------


def dense_exp(v, depth):
    levels = [np.array(1.0)]
    for k in range(1, depth + 1):
        levels.append(np.multiply.outer(levels[-1], v) / k)
    return levels


def dense_mul(a, b, depth):
    return [sum(np.multiply.outer(a[i], b[k - i]) for i in range(k + 1)) for k in range(depth + 1)]


def dense_signature(path, depth):
    path = np.asarray(path, dtype=float)
    sig = [np.array(1.0)] + [np.zeros((path.shape[1],) * k) for k in range(1, depth + 1)]
    for inc in np.diff(path, axis=0):
        sig = dense_mul(sig, dense_exp(inc, depth), depth)
    return sig


def dense_log(sig, depth):
    x = [np.array(0.0)] + list(sig[1:])
    out = [np.zeros_like(t) for t in sig]
    power = x
    for n in range(1, depth + 1):
        if n > 1:
            power = dense_mul(power, x, depth)
        out = [o + ((-1) ** (n + 1) / n) * p for o, p in zip(out, power)]
    return out


def flatten(levels):
    return np.concatenate([np.ravel(t) for t in levels[1:]])


def level2_closed_form(path):
    """Level 2 of the signature of a piecewise-linear path, summed segment by segment."""
    inc = np.diff(np.asarray(path, dtype=float), axis=0)
    before = np.cumsum(inc, axis=0) - inc
    return np.einsum("ti,tj->ij", before, inc) + 0.5 * np.einsum("ti,tj->ij", inc, inc)


def word_value(levels, word):
    return float(levels[len(word)][tuple(word)]) if word else 1.0


# -- words ----------------------------------------------------------------------------


def brute_lyndon(c, depth):
    words = []
    for k in range(1, depth + 1):
        for w in itertools.product(range(c), repeat=k):
            if all(w < w[r:] + w[:r] for r in range(1, k)):
                words.append(w)
    return words


def shuffle(u, v):
    if not u:
        return [tuple(v)]
    if not v:
        return [tuple(u)]
    return [(u[0],) + w for w in shuffle(u[1:], v)] + [(v[0],) + w for w in shuffle(u, v[1:])]


def dense_logsig(path, depth):
    c = np.asarray(path).shape[1]
    logs = dense_log(dense_signature(path, depth), depth)
    return np.array([word_value(logs, w) for w in brute_lyndon(c, depth)])


def witt(c, depth):
    def mobius(n):
        out, p = 1, 2
        while p * p <= n:
            if n % p == 0:
                n //= p
                if n % p == 0:
                    return 0
                out = -out
            p += 1
        return -out if n > 1 else out

    return sum(sum(mobius(d) * c ** (k // d) for d in range(1, k + 1) if k % d == 0) // k for k in range(1, depth + 1))


# -- finite differences -------------------------------------------------------------------


def _rel(a, b, floor=1e-10):
    return abs(a - b) / max(abs(a), abs(b), floor)


def directional_check(loss_fn, tensors, seed=0, h=1e-5, directions=3) -> float:
    """Worst relative error between ``grad . v`` and a central difference along random ``v``.

    ``loss_fn()`` must rebuild the scalar loss from the current ``.data`` of
    ``tensors`` (leaves with ``requires_grad``). Each direction is probed at
    ``h`` and ``h / 10`` and the closer estimate counts: a ReLU kink inside
    ``[-h, h]`` spoils one step size, while a wrong gradient fails at both.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    grads = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    base = [t.data.copy() for t in tensors]
    worst = 0.0
    for _ in range(directions):
        vs = [rng.normal(size=t.shape) for t in tensors]
        analytic = sum(float((g * v).sum()) for g, v in zip(grads, vs))

        def at(step):
            for t, b, v in zip(tensors, base, vs):
                t.data = b + step * v
            with ad.no_grad():
                return loss_fn().item()

        errs = [_rel(analytic, (at(step) - at(-step)) / (2 * step)) for step in (h, h / 10)]
        for t, b in zip(tensors, base):
            t.data = b
        worst = max(worst, min(errs))
    return worst


def coordinate_check(loss_fn, tensor, seed=0, h=1e-5, probes=8) -> float:
    """Worst relative error over randomly probed single coordinates of one tensor."""
    rng = np.random.default_rng(seed)
    tensor.grad = None
    loss_fn().backward()
    grad = tensor.grad.copy()
    base = tensor.data.copy()
    floor = 1e-3 * float(np.abs(grad).max()) + 1e-8  # coordinates with ~zero gradient only see round-off
    worst = 0.0
    for _ in range(probes):
        idx = tuple(int(rng.integers(0, s)) for s in tensor.shape)

        def at(delta):
            arr = base.copy()
            arr[idx] += delta
            tensor.data = arr
            with ad.no_grad():
                return loss_fn().item()

        numeric = (at(h) - at(-h)) / (2 * h)
        tensor.data = base
        worst = max(worst, abs(grad[idx] - numeric) / max(abs(grad[idx]), abs(numeric), floor))
    return worst


def weighted_sum(out, seed=0):
    """A scalar loss with random weights, so every output coordinate matters."""
    w = np.random.default_rng(seed + 10_000).normal(size=out.shape)
    return (out * w).sum()


def module_check(model, loss_fn, seed=0, h=1e-5, directions=3) -> float:
    return directional_check(loss_fn, model.parameters(), seed, h, directions)


def factorial(n):
    return math.factorial(n)
