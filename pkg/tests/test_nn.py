import math

import numpy as np
import pytest

from sigstream import autodiff as ad
from sigstream import nn
from sigstream.errors import ConfigError, ContractError, LoadError, ShapeError

from helpers import gradient_blocks, jitter
from oracles import directional_check, weighted_sum


def rng(seed=0):
    return np.random.default_rng(seed)


def set_param(p, value):
    p.data = np.asarray(value, dtype=float) * np.ones(p.shape)


# -- dense layers -------------------------------------------------------------------------


def test_dropout_eval_is_identity_and_train_rescales():
    x = ad.Tensor(rng().normal(size=(50, 40)))
    assert nn.dropout(x, 0.1, training=False) is x
    y = nn.dropout(x, 0.5, training=True, rng=rng(1)).data
    kept = y != 0
    assert np.allclose(y[kept], 2 * x.data[kept])
    assert 0.4 < kept.mean() < 0.6


def test_layer_norm_statistics():
    y = nn.layer_norm(ad.Tensor(rng().normal(3, 5, size=(6, 16)))).data
    assert np.abs(y.mean(axis=1)).max() < 1e-10
    assert np.abs(y.var(axis=1) - 1).max() < 1e-8


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        nn.Linear(3, 2, rng())(np.ones((4, 5)))


def test_conv_kernel_one_is_pointwise():
    conv = nn.Conv1d(3, 2, rng(), kernel_size=1)
    x = rng(1).normal(size=(2, 5, 3))
    assert np.allclose(conv(x).data, x @ conv.weight.data + conv.bias.data)


def test_conv_constant_input_sum_one_kernel():
    conv = nn.Conv1d(1, 1, rng(), kernel_size=3)
    set_param(conv.weight, 1 / 3)
    set_param(conv.bias, 0)
    out = conv(np.full((1, 7, 1), 2.5)).data[0, :, 0]
    assert np.allclose(out[1:-1], 2.5)
    assert np.allclose(out[[0, -1]], 2.5 * 2 / 3)


def test_conv_even_kernel_rejected():
    with pytest.raises(ContractError):
        nn.Conv1d(2, 2, rng(), kernel_size=4)


def test_lstm_zero_weights_give_zero_outputs():
    lstm = nn.LSTM(3, 4, rng(), bidirectional=True)
    for p in lstm.parameters():
        set_param(p, 0)
    out, final = lstm(rng(1).normal(size=(2, 5, 3)))
    assert not out.data.any() and not final.data.any()


def test_lstm_single_step_bidirectional():
    lstm = nn.LSTM(3, 4, rng(), bidirectional=True)
    out, final = lstm(rng(1).normal(size=(2, 1, 3)))
    assert np.array_equal(out.data[:, 0], final.data)


def test_attention_head_divisibility():
    nn.MultiHeadSelfAttention(385, 5, rng())
    with pytest.raises(ConfigError, match="385.*num_heads=4"):
        nn.MultiHeadSelfAttention(385, 4, rng())


def test_single_unmasked_key_returns_value_projection():
    attn = nn.MultiHeadSelfAttention(6, 2, rng())
    x = rng(1).normal(size=(2, 4, 6))
    mask = np.array([[False, False, False, True], [False, False, True, True]])
    out = attn(x, mask).data
    want = attn.out(attn.v(x[:, 3:])).data[:, 0]
    assert np.allclose(out[0, 3], want[0])
    w = attn.last_weights
    assert np.allclose(w.sum(axis=-1), 1.0)
    assert not w[0, ..., :3].any() and not w[1, ..., :2].any()


def test_encoder_with_zeroed_sublayers_is_layer_norm():
    layer = nn.EncoderLayer(8, 2, rng())
    for p in (layer.attn.out.weight, layer.attn.out.bias, layer.ff2.weight, layer.ff2.bias):
        set_param(p, 0)
    x = rng(1).normal(size=(3, 4, 8))
    assert np.allclose(layer(x).data, nn.layer_norm(x).data, atol=1e-7)


def test_cls_output_depends_on_every_unit():
    enc = nn.CLSEncoder(8, 5, 2, 2, rng())
    x = rng(1).normal(size=(1, 5, 8))
    base = enc(x).data
    for q in range(5):
        y = x.copy()
        y[0, q] += 0.1
        assert np.abs(enc(y).data - base).max() > 1e-6


# -- masking --------------------------------------------------------------------------


def masked_pair(seed, b=3, m=6, d=4, pads=(2, 0, 4)):
    r = rng(seed)
    x = r.normal(size=(b, m, d))
    mask = np.ones((b, m), dtype=bool)
    for i, p in enumerate(pads):
        mask[i, :p] = False
    garbage = np.where(mask[..., None], x, r.normal(size=x.shape) * 100)
    zeros = np.where(mask[..., None], x, 0.0)
    return zeros, garbage, mask


def test_padding_content_never_leaks():
    zeros, garbage, mask = masked_pair(0)
    conv = nn.Conv1d(4, 3, rng())
    assert np.allclose(conv(zeros, mask).data, conv(garbage, mask).data, atol=1e-12)
    attn = nn.MultiHeadSelfAttention(4, 2, rng())
    assert np.allclose(attn(zeros, mask).data[mask], attn(garbage, mask).data[mask], atol=1e-12)
    lstm = nn.LSTM(4, 3, rng(), bidirectional=True)
    assert np.allclose(lstm(zeros, mask)[1].data, lstm(garbage, mask)[1].data, atol=1e-12)
    enc = nn.CLSEncoder(4, 6, 1, 2, rng())
    assert np.allclose(enc(zeros, mask).data, enc(garbage, mask).data, atol=1e-12)


# -- gradients -------------------------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(gradient_blocks(0)))
def test_block_gradients(name):
    for seed in range(10):
        module, call = gradient_blocks(seed)[name]
        jitter(module, seed + 200, 0.1)
        x = ad.Tensor(rng(seed + 100).normal(size=(2, 4, 4)), requires_grad=True)
        loss = lambda: weighted_sum(call(module, x), seed)  # noqa: E731
        assert directional_check(loss, [x, *module.parameters()], seed) <= 1e-5


# -- losses ----------------------------------------------------------------------------------------


def test_focal_reduces_to_cross_entropy():
    r = rng(3)
    logits, labels = r.normal(size=(20, 4)) * 3, r.integers(0, 4, 20)
    fl = nn.focal_loss(logits, labels, nn.FocalLossSpec(0.0, (1.0,) * 4)).item()
    assert abs(fl - nn.cross_entropy(logits, labels).item()) <= 1e-12


def test_focal_hand_value():
    out = nn.focal_loss(np.zeros((1, 2)), [0], nn.FocalLossSpec.uniform(2, gamma=2.0)).item()
    assert math.isclose(out, 0.25 * math.log(2), rel_tol=1e-12)
    assert math.isclose(out, 0.173287, abs_tol=1e-6)


def test_alpha_from_frequencies():
    spec = nn.FocalLossSpec.from_frequencies([0.8, 0.2])
    assert np.allclose(spec.alpha, (1.118034, 2.236068), atol=1e-6)
    labels = np.array([0] * 8 + [1] * 2)
    assert np.allclose(nn.FocalLossSpec.from_labels(labels, 2).alpha, spec.alpha)


def test_focal_nonnegative_and_monotone():
    spec = nn.FocalLossSpec(2.0, (1.0, 3.0))
    values = [nn.focal_loss(np.array([[z, 0.0]]), [0], spec).item() for z in np.linspace(-5, 5, 21)]
    assert min(values) >= 0
    assert all(a > b for a, b in zip(values, values[1:]))


def test_loss_errors():
    with pytest.raises(ContractError):
        nn.cross_entropy(np.zeros((0, 2)), np.zeros(0, dtype=int))
    with pytest.raises(ContractError):
        nn.cross_entropy(np.zeros((1, 2)), [2])


# -- parameters and checkpoints ----------------------------------------------------------------------


def test_initialization_determinism_and_scheme():
    a, b = nn.LSTM(5, 4, rng(9), True), nn.LSTM(5, 4, rng(9), True)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    lin = nn.Linear(16, 8, rng())
    assert np.abs(lin.weight.data).max() <= 0.25 and not lin.bias.data.any()
    assert np.array_equal(a.fwd.bias.data[4:8], np.ones(4))


def test_checkpoint_round_trip(tmp_path):
    src = nn.SWAttnBlock(4, 3, 2, rng(1))
    nn.save_checkpoint(src, tmp_path / "m.sgem")
    dst = nn.SWAttnBlock(4, 3, 2, rng(2))
    nn.load_checkpoint(dst, tmp_path / "m.sgem")
    for (_, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
        assert np.array_equal(a.data, b.data)
    with pytest.raises(ContractError):
        nn.load_checkpoint(nn.Linear(4, 3, rng()), tmp_path / "m.sgem")
    with pytest.raises(LoadError):
        nn.load_checkpoint(dst, tmp_path / "missing.sgem")


def test_state_dict_shape_mismatch():
    state = nn.Linear(4, 3, rng()).state_dict()
    with pytest.raises(ShapeError):
        nn.Linear(4, 2, rng()).load_state_dict(state)
