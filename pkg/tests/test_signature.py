import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sigstream import autodiff as ad
from sigstream.errors import ContractError, DomainError, ShapeError
from sigstream.signature import (
    LyndonBasis,
    SignatureSpec,
    TruncatedTensor,
    expanding_signatures,
    is_lyndon,
    log_signature,
    logsig_channels,
    sig_channels,
    signature,
    tensor_exp,
    tensor_log,
    tensor_mul,
)

from oracles import (
    brute_lyndon,
    coordinate_check,
    dense_logsig,
    dense_signature,
    directional_check,
    flatten,
    level2_closed_form,
    weighted_sum,
    witt,
)

BACKENDS = ["numpy", "numba"]


def sig(path, depth, backend=None):
    return signature(np.asarray(path, dtype=float), depth, backend=backend).data


def test_channel_counts():
    assert logsig_channels(10, 3) == 385
    assert logsig_channels(12, 3) == 650
    assert sig_channels(2, 2) == 6
    assert logsig_channels(2, 2) == 3


def test_lyndon_basis_matches_brute_force():
    for c in range(1, 5):
        for depth in range(1, 5):
            basis = LyndonBasis.build(c, depth)
            assert [tuple(w) for w in basis.words] == brute_lyndon(c, depth)
            assert len(basis) == logsig_channels(c, depth) == witt(c, depth)
            assert all(is_lyndon(w) for w in basis.words)


def test_invalid_counts():
    with pytest.raises(ContractError):
        sig_channels(0, 2)
    with pytest.raises(ContractError):
        SignatureSpec(2, 0)


def test_signature_examples():
    a = 0.7
    assert np.allclose(sig([[0.0], [a]], 2), [a, a * a / 2])
    assert np.allclose(sig([[0, 0], [1, 0], [1, 1]], 2), [1, 1, 0.5, 1.0, 0.0, 0.5])
    assert np.array_equal(sig(np.ones((4, 3)), 3), np.zeros(sig_channels(3, 3)))


def test_log_signature_examples():
    out = log_signature(np.array([[0, 0], [1, 0], [1, 1.0]]), 2).data
    assert np.allclose(out, [1, 1, 0.5])
    a = -1.3
    assert np.allclose(log_signature(np.array([[0.0], [a]]), 4).data, [a])
    full = tensor_log(tensor_exp([a], 4))
    assert np.allclose(full.flat(), [a, 0, 0, 0])
    assert np.allclose(log_signature(np.array([[0.0, 0.0], [a, 0.0]]), 3).data[1:], 0)
    assert np.array_equal(log_signature(np.zeros((3, 2)), 3).data, np.zeros(logsig_channels(2, 3)))


def test_path_validation():
    with pytest.raises(ContractError):
        signature(np.zeros((1, 2)), 2)
    with pytest.raises(ShapeError):
        signature(np.zeros(3), 2)


@pytest.mark.parametrize("backend", BACKENDS)
def test_signature_matches_dense_oracle(backend):
    rng = np.random.default_rng(0)
    for _ in range(20):
        c, depth, m = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(2, 7))
        path = rng.normal(size=(m, c))
        assert np.allclose(sig(path, depth, backend), flatten(dense_signature(path, depth)), atol=1e-12)
        got = log_signature(path, depth, backend=backend).data
        assert np.allclose(got, dense_logsig(path, depth), atol=1e-12)


def test_level2_matches_closed_form():
    rng = np.random.default_rng(1)
    path = rng.normal(size=(6, 3))
    assert np.allclose(sig(path, 2)[3:], level2_closed_form(path).ravel(), atol=1e-13)


def test_batched_signature_equals_per_sample():
    rng = np.random.default_rng(2)
    paths = rng.normal(size=(2, 3, 5, 2))
    out = signature(paths, 3).data
    assert out.shape == (2, 3, sig_channels(2, 3))
    assert np.allclose(out[1, 2], sig(paths[1, 2], 3))


def test_expanding_examples():
    rng = np.random.default_rng(3)
    path = rng.normal(size=(5, 2))
    rows = expanding_signatures(path, 3).data
    assert rows.shape == (4, sig_channels(2, 3))
    assert np.allclose(rows[-1], sig(path, 3))
    assert np.allclose(rows[0], sig(path[:2], 3))
    dup = expanding_signatures(np.vstack([path, path[-1:]]), 3).data
    assert np.allclose(dup[-1], dup[-2])
    logs = expanding_signatures(path, SignatureSpec(2, 3, True)).data
    for j in range(4):
        assert np.allclose(logs[j], dense_logsig(path[: j + 2], 3), atol=1e-12)


def test_tensor_algebra_examples():
    rng = np.random.default_rng(4)
    x = TruncatedTensor(3, 3, [rng.normal(size=3**k) for k in (1, 2, 3)])
    assert np.allclose(tensor_mul(x, TruncatedTensor.identity(3, 3)).flat(), x.flat())
    v = rng.normal(size=3)
    logged = tensor_log(tensor_exp(v, 3))
    assert np.allclose(logged.levels[0], v)
    assert np.allclose(np.concatenate(logged.levels[1:]), 0, atol=1e-15)
    u = rng.normal(size=3)
    prod = tensor_mul(tensor_exp(u, 3), tensor_exp(v, 3))
    want = np.outer(u, u) / 2 + np.outer(u, v) + np.outer(v, v) / 2
    assert np.allclose(prod.levels[1], want.ravel())
    with pytest.raises(ContractError):
        tensor_mul(x, TruncatedTensor.identity(2, 3))
    with pytest.raises(ContractError):
        tensor_mul(x, TruncatedTensor.identity(3, 2))


def test_tensor_log_needs_unit_scalar():
    with pytest.raises(DomainError):
        tensor_log(TruncatedTensor(2, 2, [np.zeros(2), np.zeros(4)], scalar=2.0))


paths = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s))


@settings(max_examples=40, deadline=None)
@given(rng=paths, c=st.integers(1, 3), depth=st.integers(1, 4), m=st.integers(2, 6))
def test_reparameterization_and_displacement(rng, c, depth, m):
    path = rng.normal(size=(m, c))
    at = int(rng.integers(0, m))
    repeated = np.insert(path, at, path[at], axis=0)
    assert np.allclose(sig(repeated, depth), sig(path, depth), atol=1e-12)
    assert np.allclose(log_signature(repeated, depth).data, log_signature(path, depth).data, atol=1e-12)
    assert np.allclose(sig(path, depth)[:c], path[-1] - path[0], atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(rng=paths, c=st.integers(1, 3), depth=st.integers(1, 4))
def test_chen_and_reversal(rng, c, depth):
    x = rng.normal(size=(int(rng.integers(2, 5)), c))
    y = np.vstack([x[-1:], x[-1] + rng.normal(size=(int(rng.integers(1, 4)), c))])
    sx = TruncatedTensor.from_flat(c, depth, sig(x, depth))
    sy = TruncatedTensor.from_flat(c, depth, sig(y, depth))
    assert np.allclose(tensor_mul(sx, sy).flat(), sig(np.vstack([x, y[1:]]), depth), atol=1e-9)
    back = TruncatedTensor.from_flat(c, depth, sig(x[::-1], depth))
    assert np.max(np.abs(tensor_mul(sx, back).flat())) <= 1e-9


@pytest.mark.parametrize("backend", BACKENDS)
def test_gradients(backend):
    for seed in range(5):
        rng = np.random.default_rng(seed)
        m, c, depth = int(rng.integers(2, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = ad.Tensor(rng.normal(size=(2, m, c)), requires_grad=True)
        for fn in (signature, log_signature):
            loss = lambda: weighted_sum(fn(x, depth, backend=backend), seed)  # noqa: E731
            assert directional_check(loss, [x], seed) <= 1e-5
            assert coordinate_check(loss, x, seed) <= 1e-5
        spec = SignatureSpec(c, depth, True)
        loss = lambda: weighted_sum(expanding_signatures(x, spec, backend=backend), seed)  # noqa: E731
        assert directional_check(loss, [x], seed) <= 1e-5


def test_backends_agree():
    rng = np.random.default_rng(7)
    x = ad.Tensor(rng.normal(size=(8, 6, 3)), requires_grad=True)
    spec = SignatureSpec(3, 4, True)
    grads = []
    for backend in BACKENDS:
        x.grad = None
        out = expanding_signatures(x, spec, backend=backend)
        weighted_sum(out).backward()
        grads.append((out.data, x.grad.copy()))
    assert np.allclose(grads[0][0], grads[1][0], rtol=1e-11, atol=1e-13)
    assert np.allclose(grads[0][1], grads[1][1], rtol=1e-11, atol=1e-13)
