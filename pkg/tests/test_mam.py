import numpy as np
import pytest

from conftest import check_gradients
from jointsal.autodiff import Tensor
from jointsal.errors import ConfigError
from jointsal.mam import MultiTaskAttention, mam_forward
from jointsal.ops import sigmoid


def _mam(seg=6, C=8, r=4, seed=0):
    return MultiTaskAttention(np.random.default_rng(seed), seg, C, r)


def _saturate(m: MultiTaskAttention, value: float):
    m.fc2.weight.data[:] = 0
    m.fc2.bias.data[:] = value / 2  # both pooled paths add the bias once


def test_attention_strictly_inside_unit_interval(rng):
    m = _mam()
    for _ in range(20):
        s = Tensor(rng.standard_normal((2, 6, 3, 4)) * 5)
        f = Tensor(rng.standard_normal((2, 8, 2, 2)))
        mam_forward(s, f, m)
        att = m.last_attention
        assert np.all(att > 0) and np.all(att < 1)


def test_exact_channel_factorization(rng):
    m = _mam()
    s = Tensor(rng.standard_normal((3, 6, 4, 4)))
    f = rng.standard_normal((3, 8, 2, 3))
    fa = m(s, Tensor(f)).data
    att = m.last_attention
    assert np.array_equal(fa, f * att[:, :, None, None])
    ratio = fa / f
    assert np.allclose(ratio, ratio[:, :, :1, :1], rtol=1e-14, atol=0)


def test_saturation_limits(rng):
    m = _mam()
    s = Tensor(rng.standard_normal((2, 6, 3, 3)))
    f = rng.standard_normal((2, 8, 2, 2))
    _saturate(m, 40.0)
    fa = m(s, Tensor(f)).data
    assert np.all(np.abs(fa - f) <= 1e-8 * np.abs(f))
    _saturate(m, -40.0)
    fa = m(s, Tensor(f)).data
    assert np.all(np.abs(fa) <= 1e-8 * np.abs(f))


def test_bias_twenty_example(rng):
    # "+20 bias" means the MLP emits +20 on each pooled path
    m = _mam()
    s = Tensor(rng.standard_normal((1, 6, 3, 3)))
    f = rng.standard_normal((1, 8, 2, 2))
    m.fc2.weight.data[:] = 0
    m.fc2.bias.data[:] = 20.0
    fa = m(s, Tensor(f)).data
    assert np.all(np.abs(fa - f) <= 1e-8 * np.abs(f))


def test_identity_mlp_gives_sigmoid_two_v():
    C = 4
    m = MultiTaskAttention(np.random.default_rng(0), C, C, reduction=1)
    for layer in (m.transfer,):
        layer.weight.data[:] = np.eye(C)[:, :, None, None]
        layer.bias.data[:] = 0
    for layer in (m.fc1, m.fc2):
        layer.weight.data[:] = np.eye(C)
        layer.bias.data[:] = 0
    v = np.array([0.3, 1.2, 2.0, 0.05])
    s = Tensor(np.broadcast_to(v[None, :, None, None], (1, C, 3, 5)).copy())
    f = np.ones((1, C, 2, 2))
    m(s, Tensor(f))
    want = sigmoid(Tensor(2 * v)).data
    assert np.allclose(m.last_attention[0], want, atol=1e-15)


def test_mlp_is_shared():
    m = _mam()
    names = [n for n, _ in m.named_parameters()]
    assert names == ["transfer.weight", "transfer.bias", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]
    v = Tensor(np.random.default_rng(1).standard_normal((1, 8)))
    before = m.mlp(v).data
    m.fc1.weight.data += 0.1
    after = m.mlp(v).data
    assert not np.array_equal(before, after)  # the single MLP serves both paths


def test_channel_mismatch():
    with pytest.raises(ConfigError):
        _mam(C=8)(Tensor(np.zeros((1, 6, 2, 2))), Tensor(np.zeros((1, 4, 2, 2))))


def test_gradients_reach_both_inputs(rng):
    m = _mam()
    s = Tensor(rng.standard_normal((2, 6, 3, 3)), requires_grad=True)
    f = Tensor(rng.standard_normal((2, 8, 2, 2)), requires_grad=True)
    (m(s, f) * Tensor(rng.standard_normal((2, 8, 2, 2)))).sum().backward()
    assert np.abs(s.grad).sum() > 0 and np.abs(f.grad).sum() > 0
    check_gradients(lambda a, b: m(a, b), [rng.standard_normal((2, 6, 3, 3)), rng.standard_normal((2, 8, 2, 2))], rng)
