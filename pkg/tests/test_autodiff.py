import numpy as np
import pytest

from sigstream import autodiff as ad
from sigstream.errors import ContractError, DomainError, ShapeError

from oracles import directional_check, weighted_sum


def leaf(arr):
    return ad.Tensor(arr, requires_grad=True)


def test_add_and_identity_mul():
    assert np.array_equal(ad.add(ad.Tensor([1, 2]), ad.Tensor([3, 4])).data, [4, 6])
    x = ad.Tensor(np.random.default_rng(0).normal(size=(3, 2)))
    assert np.array_equal(ad.mul(x, ad.ones_like(x)).data, x.data)


def test_tanh_derivative_matches_central_difference():
    x = leaf(0.3)
    ad.tanh(x).backward()
    h = 1e-5
    numeric = (np.tanh(0.3 + h) - np.tanh(0.3 - h)) / (2 * h)
    assert abs(x.grad - numeric) / abs(numeric) < 1e-8


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones(4)))


def test_domain_errors():
    with pytest.raises(DomainError):
        ad.log(ad.Tensor([-1.0]))
    with pytest.raises(DomainError):
        ad.div(ad.Tensor([1.0]), ad.Tensor([0.0]))
    with pytest.raises(DomainError):
        ad.Tensor([np.nan])


def test_matmul_examples():
    a = np.random.default_rng(1).normal(size=(3, 3))
    assert np.allclose(ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(a)).data, a)
    out = ad.matmul(ad.Tensor([[1, 2], [3, 4]]), ad.Tensor([[0], [1]]))
    assert np.array_equal(out.data, [[2], [4]])
    with pytest.raises(ShapeError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_matmul_gradient_is_broadcast_column_sums():
    rng = np.random.default_rng(2)
    A, B = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    ad.matmul(A, B).sum().backward()
    assert np.allclose(A.grad, np.tile(B.data.sum(axis=1), (3, 1)))


def test_reduce_concat_and_mean_gradient():
    assert ad.Tensor([1, 2, 3]).sum().item() == 6
    out = ad.concat([ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 2)))], axis=1)
    assert out.shape == (2, 5)
    x = leaf(np.arange(5.0))
    x.mean().backward()
    assert np.allclose(x.grad, 0.2)
    with pytest.raises(IndexError):
        ad.reduce("sum", x, axis=3)


def test_backward_contract_and_accumulation():
    x = leaf(np.arange(4.0))
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones(4))
    x.sum().backward()
    assert np.array_equal(x.grad, 2 * np.ones(4))
    y = leaf(np.array([0.5, -1.0, 2.0]))
    (y * y).sum().backward()
    assert np.allclose(y.grad, 2 * y.data)
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_broadcast_equals_explicit_tiling():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3,))
    for fn in (ad.add, ad.mul, ad.sub, ad.div):
        got = fn(ad.Tensor(a), ad.Tensor(b)).data
        want = fn(ad.Tensor(a), ad.Tensor(np.tile(b, (4, 1)))).data
        assert np.array_equal(got, want)


def test_replay_is_deterministic():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 2))

    def run():
        return ad.softmax(ad.tanh(ad.matmul(ad.Tensor(a), ad.Tensor(b))), axis=-1).data.tobytes()

    assert run() == run()


UNARY = {
    "exp": ad.exp,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "relu": lambda x: ad.relu(x + 0.05),
    "log": lambda x: ad.log(x * x + 0.5),
    "pow": lambda x: ad.pow_scalar(x * x + 0.5, 1.5),
    "neg": ad.neg,
    "softmax": lambda x: ad.softmax(x, axis=-1),
    "log_softmax": lambda x: ad.log_softmax(x, axis=-1),
    "masked_softmax": lambda x: ad.softmax(x, axis=-1, mask=np.array([True, False, True, True])),
    "sum": lambda x: ad.reduce("sum", x, axis=0),
    "mean": lambda x: ad.reduce("mean", x, axis=1, keepdims=True),
    "max": lambda x: ad.reduce("max", x, axis=1),
    "reshape": lambda x: ad.reshape(x, (4, 3)),
    "transpose": lambda x: ad.transpose(x),
    "swapaxes": lambda x: ad.swapaxes(x, 0, 1),
    "getitem": lambda x: x[1:, ::2],
    "fancy": lambda x: ad.getitem(x, (np.array([0, 2, 2]), np.array([1, 0, 3]))),
    "take": lambda x: ad.take(x, np.array([3, 0, 0, 1]), axis=1),
    "where": lambda x: ad.where(x.data > 0, x, x * x),
}

BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, b * b + 0.5),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b)),
    "concat": lambda a, b: ad.concat([a, b], axis=0),
    "stack": lambda a, b: ad.stack([a, b], axis=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    fn = UNARY[name]
    for seed in range(20):
        x = leaf(np.random.default_rng(seed).uniform(-1, 1, size=(3, 4)))
        assert directional_check(lambda: weighted_sum(fn(x), seed), [x], seed) <= 1e-6


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name):
    fn = BINARY[name]
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a, b = leaf(rng.uniform(-1, 1, size=(3, 4))), leaf(rng.uniform(-1, 1, size=(3, 4)))
        assert directional_check(lambda: weighted_sum(fn(a, b), seed), [a, b], seed) <= 1e-6


def test_broadcast_gradient_unbroadcasts():
    a, b = leaf(np.ones((4, 3))), leaf(np.arange(3.0))
    (a * b).sum().backward()
    assert b.grad.shape == (3,)
    assert np.allclose(b.grad, 4.0)


def test_fully_masked_softmax_row_is_an_error():
    with pytest.raises(ContractError):
        ad.softmax(ad.Tensor(np.ones((2, 3))), axis=-1, mask=np.array([[True, True, False], [False, False, False]]))


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with ad.no_grad():
        y = x * 3
    assert not y.requires_grad


def test_data_is_read_only():
    x = ad.Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        x.data[0] = 5.0
