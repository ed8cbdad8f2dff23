"""Hot loops of the truncated tensor algebra.

Truncated tensors are stored flat, level-major, with the scalar level 0 at
index 0, so a batch is a ``[B, D]`` float64 array with
``D = 1 + c + c**2 + ... + c**depth``. Each kernel exists twice: a numba
``@njit`` loop nest and a numpy version built from batched outer products.
``tmul``/``tmul_backward`` pick one according to :mod:`sigstream._accel`
unless a backend is named explicitly.
"""

from __future__ import annotations

import numpy as np

from . import _accel
from ._accel import njit


def level_layout(c: int, depth: int) -> tuple[np.ndarray, np.ndarray]:
    sizes = np.array([c**k for k in range(depth + 1)], dtype=np.int64)
    offsets = np.zeros(depth + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(sizes)[:-1]
    return offsets, sizes


# The numba kernels work on transposed operands, ``[D, B]`` or ``[m, D, B]``, so
# the innermost loop runs over the batch with unit stride and vectorises.


@njit(cache=True, fastmath=True)
def _tmul_t(a, b, out, depth, offsets, sizes):
    B = a.shape[1]
    for k in range(depth + 1):
        ok = offsets[k]
        for i in range(k + 1):
            j = k - i
            oi = offsets[i]
            oj = offsets[j]
            sj = sizes[j]
            for p in range(sizes[i]):
                x = a[oi + p]
                for q in range(sj):
                    y = b[oj + q]
                    o = out[ok + p * sj + q]
                    for n in range(B):
                        o[n] += x[n] * y[n]


@njit(cache=True, fastmath=True)
def _tmul_backward_t(a, b, g, ga, gb, depth, offsets, sizes):
    B = a.shape[1]
    for k in range(depth + 1):
        ok = offsets[k]
        for i in range(k + 1):
            j = k - i
            oi = offsets[i]
            oj = offsets[j]
            sj = sizes[j]
            for p in range(sizes[i]):
                x = a[oi + p]
                gx = ga[oi + p]
                for q in range(sj):
                    y = b[oj + q]
                    gy = gb[oj + q]
                    gv = g[ok + p * sj + q]
                    for n in range(B):
                        gx[n] += gv[n] * y[n]
                        gy[n] += x[n] * gv[n]


@njit(cache=True, fastmath=True)
def _texp_t(x, e, depth, offsets, sizes):
    c, B = x.shape
    for n in range(B):
        e[0, n] = 1.0
    for k in range(1, depth + 1):
        ok = offsets[k]
        op = offsets[k - 1]
        for p in range(sizes[k - 1]):
            ep = e[op + p]
            for q in range(c):
                xq = x[q]
                o = e[ok + p * c + q]
                for n in range(B):
                    o[n] = ep[n] * xq[n] / k


@njit(cache=True, fastmath=True)
def _texp_backward_t(x, e, g, gx, carry, nxt, depth, offsets, sizes):
    c, B = x.shape
    od = offsets[depth]
    for p in range(sizes[depth]):
        for n in range(B):
            carry[p, n] = g[od + p, n]
    for k in range(depth, 0, -1):
        if k == 1:
            for q in range(c):
                for n in range(B):
                    gx[q, n] += carry[q, n]
            break
        op = offsets[k - 1]
        for p in range(sizes[k - 1]):
            ep = e[op + p]
            acc = nxt[p]
            for n in range(B):
                acc[n] = 0.0
            for q in range(c):
                gm = carry[p * c + q]
                xq = x[q]
                gq = gx[q]
                for n in range(B):
                    gq[n] += ep[n] * gm[n] / k
                    acc[n] += gm[n] * xq[n]
            for n in range(B):
                acc[n] = g[op + p, n] + acc[n] / k
        for p in range(sizes[k - 1]):
            for n in range(B):
                carry[p, n] = nxt[p, n]


@njit(cache=True)
def _expanding_t(incs, sigs, exps, depth, offsets, sizes):
    for n in range(incs.shape[2]):
        sigs[0, 0, n] = 1.0
    for j in range(incs.shape[0]):
        _texp_t(incs[j], exps[j], depth, offsets, sizes)
        _tmul_t(sigs[j], exps[j], sigs[j + 1], depth, offsets, sizes)


@njit(cache=True)
def _expanding_backward_t(sigs, exps, incs, g, gx, depth, offsets, sizes):
    m, D, B = sigs.shape
    c = incs.shape[1]
    top = sizes[depth]
    carry = np.zeros((D, B))
    g_prev = np.zeros((D, B))
    g_exp = np.zeros((D, B))
    g_inc = np.zeros((c, B))
    buf_a = np.zeros((top, B))
    buf_b = np.zeros((top, B))
    for j in range(m - 1, 0, -1):
        for d in range(1, D):
            for n in range(B):
                carry[d, n] += g[j - 1, d - 1, n]
        g_prev[:] = 0.0
        g_exp[:] = 0.0
        g_inc[:] = 0.0
        _tmul_backward_t(sigs[j - 1], exps[j - 1], carry, g_prev, g_exp, depth, offsets, sizes)
        _texp_backward_t(incs[j - 1], exps[j - 1], g_exp, g_inc, buf_a, buf_b, depth, offsets, sizes)
        for q in range(c):
            for n in range(B):
                gx[j, q, n] += g_inc[q, n]
                gx[j - 1, q, n] -= g_inc[q, n]
        carry[:] = g_prev


def _t(x: np.ndarray) -> np.ndarray:
    """Move the leading batch axis last, contiguously."""
    return np.ascontiguousarray(np.moveaxis(x, 0, -1))


def _untranspose(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(x, -1, 0))


def _tmul_np(a, b, depth, offsets, sizes):
    B = a.shape[0]
    out = np.zeros_like(a)
    for k in range(depth + 1):
        ok = offsets[k]
        acc = out[:, ok : ok + sizes[k]].reshape(B, -1)
        for i in range(k + 1):
            j = k - i
            ai = a[:, offsets[i] : offsets[i] + sizes[i]]
            bj = b[:, offsets[j] : offsets[j] + sizes[j]]
            acc += (ai[:, :, None] * bj[:, None, :]).reshape(B, -1)
        out[:, ok : ok + sizes[k]] = acc
    return out


def _tmul_backward_np(a, b, g, depth, offsets, sizes):
    B = a.shape[0]
    ga = np.zeros_like(a)
    gb = np.zeros_like(b)
    for k in range(depth + 1):
        gk = g[:, offsets[k] : offsets[k] + sizes[k]]
        for i in range(k + 1):
            j = k - i
            si, sj = sizes[i], sizes[j]
            ai = a[:, offsets[i] : offsets[i] + si]
            bj = b[:, offsets[j] : offsets[j] + sj]
            gm = gk.reshape(B, si, sj)
            ga[:, offsets[i] : offsets[i] + si] += np.einsum("bpq,bq->bp", gm, bj)
            gb[:, offsets[j] : offsets[j] + sj] += np.einsum("bp,bpq->bq", ai, gm)
    return ga, gb


def _use_numba(backend: str | None) -> bool:
    if backend is None:
        return _accel.HAS_NUMBA
    if backend == "numba" and not _accel.HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is unavailable or disabled")
    return backend == "numba"


def expanding(incs: np.ndarray, depth: int, offsets, sizes, backend: str | None = None):
    """Levels 1..N of every prefix signature, ``[B, m-1, D-1]``, plus an opaque state for the backward pass."""
    B, m1, c = incs.shape
    D = int(offsets[-1] + sizes[-1])
    if _use_numba(backend):
        incs_t = np.ascontiguousarray(incs.transpose(1, 2, 0))
        sigs = np.zeros((m1 + 1, D, B))
        exps = np.zeros((m1, D, B))
        _expanding_t(incs_t, sigs, exps, depth, offsets, sizes)
        out = np.ascontiguousarray(sigs[1:, 1:].transpose(2, 0, 1))
        return out, ("numba", sigs, exps, incs_t)
    sigs = np.zeros((B, m1 + 1, D))
    exps = np.zeros((B, m1, D))
    sigs[:, 0, 0] = 1.0
    for j in range(m1):
        exps[:, j] = texp(incs[:, j], depth, offsets, sizes)
        sigs[:, j + 1] = _tmul_np(sigs[:, j], exps[:, j], depth, offsets, sizes)
    return sigs[:, 1:, 1:], ("numpy", sigs, exps, incs)


def expanding_backward(state, g: np.ndarray, depth: int, offsets, sizes) -> np.ndarray:
    """Gradient ``[B, m, c]`` with respect to the path points given ``g`` shaped like the forward output."""
    kind, sigs, exps, incs = state
    if kind == "numba":
        m, D, B = sigs.shape
        gx = np.zeros((m, incs.shape[1], B))
        _expanding_backward_t(sigs, exps, incs, np.ascontiguousarray(g.transpose(1, 2, 0)), gx, depth, offsets, sizes)
        return np.ascontiguousarray(gx.transpose(2, 0, 1))
    B, m, D = sigs.shape
    gx = np.zeros((B, m, incs.shape[2]))
    carry = np.zeros((B, D))
    for j in range(m - 1, 0, -1):
        carry[:, 1:] += g[:, j - 1]
        g_prev, g_exp = _tmul_backward_np(sigs[:, j - 1], exps[:, j - 1], carry, depth, offsets, sizes)
        g_inc = texp_backward(incs[:, j - 1], exps[:, j - 1], g_exp, depth, offsets, sizes)
        gx[:, j] += g_inc
        gx[:, j - 1] -= g_inc
        carry = g_prev
    return gx


def tmul(a: np.ndarray, b: np.ndarray, depth: int, offsets, sizes, backend: str | None = None) -> np.ndarray:
    """Batched truncated tensor product ``a ⊗ b``."""
    if _use_numba(backend):
        out = np.zeros((a.shape[1], a.shape[0]))
        _tmul_t(_t(a), _t(b), out, depth, offsets, sizes)
        return _untranspose(out)
    return _tmul_np(a, b, depth, offsets, sizes)


def tmul_backward(a, b, g, depth: int, offsets, sizes, backend: str | None = None):
    """Vector-Jacobian product of :func:`tmul` with respect to both factors."""
    if _use_numba(backend):
        ga = np.zeros((a.shape[1], a.shape[0]))
        gb = np.zeros_like(ga)
        _tmul_backward_t(_t(a), _t(b), _t(g), ga, gb, depth, offsets, sizes)
        return _untranspose(ga), _untranspose(gb)
    return _tmul_backward_np(a, b, g, depth, offsets, sizes)


def log_series(full: np.ndarray, depth: int, offsets, sizes, backend: str | None = None):
    """``log(1 + X)`` for a batch whose level-0 entries are 1, plus state for :func:`log_series_backward`.

    The numba path stays in the transposed layout for the whole series, so
    operands are transposed once rather than around every product.
    """
    numba = _use_numba(backend)
    x = _t(full) if numba else full.copy()
    x[0 if numba else (slice(None), 0)] = 0.0
    powers = [x]
    out = x.copy()
    p = x
    for n in range(2, depth + 1):
        if numba:
            nxt = np.zeros_like(x)
            _tmul_t(p, x, nxt, depth, offsets, sizes)
            p = nxt
        else:
            p = _tmul_np(p, x, depth, offsets, sizes)
        powers.append(p)
        out += ((-1) ** (n + 1) / n) * p
    return (_untranspose(out) if numba else out), (numba, powers)


def log_series_backward(state, g: np.ndarray, depth: int, offsets, sizes) -> np.ndarray:
    """Gradient with respect to the full input of :func:`log_series` (the level-0 slot included)."""
    numba, powers = state
    gl = _t(g) if numba else g
    gx = np.zeros_like(powers[0])
    gp = ((-1) ** (depth + 1) / depth) * gl
    for n in range(depth, 1, -1):
        if numba:
            g_prev, g_x = np.zeros_like(gx), np.zeros_like(gx)
            _tmul_backward_t(powers[n - 2], powers[0], gp, g_prev, g_x, depth, offsets, sizes)
        else:
            g_prev, g_x = _tmul_backward_np(powers[n - 2], powers[0], gp, depth, offsets, sizes)
        gx += g_x
        gp = ((-1) ** n / (n - 1)) * gl + g_prev
    gx += gp
    return _untranspose(gx) if numba else gx


def texp(x: np.ndarray, depth: int, offsets, sizes) -> np.ndarray:
    """Batched tensor exponential of level-1 elements ``x[B, c]``."""
    B, c = x.shape
    out = np.zeros((B, int(offsets[-1] + sizes[-1])))
    out[:, 0] = 1.0
    prev = np.ones((B, 1))
    for k in range(1, depth + 1):
        prev = (prev[:, :, None] * x[:, None, :]).reshape(B, -1) / k
        out[:, offsets[k] : offsets[k] + sizes[k]] = prev
    return out


def texp_backward(x: np.ndarray, e: np.ndarray, g: np.ndarray, depth: int, offsets, sizes) -> np.ndarray:
    """Gradient of :func:`texp` with respect to ``x`` given its output ``e``."""
    B, c = x.shape
    gx = np.zeros_like(x)
    carry = g[:, offsets[depth] : offsets[depth] + sizes[depth]].copy()
    for k in range(depth, 0, -1):
        # E_k = (E_{k-1} ⊗ x) / k
        gm = carry.reshape(B, -1, c) / k
        if k == 1:
            gx += gm[:, 0, :]
            break
        prev = e[:, offsets[k - 1] : offsets[k - 1] + sizes[k - 1]]
        gx += np.einsum("bp,bpq->bq", prev, gm)
        carry = g[:, offsets[k - 1] : offsets[k - 1] + sizes[k - 1]] + np.einsum("bpq,bq->bp", gm, x)
    return gx
