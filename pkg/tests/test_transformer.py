import numpy as np
import pytest

from conftest import check_gradients
from jointsal.autodiff import Tensor
from jointsal.backbone import PatchSequence, flatten_tokens
from jointsal.config import ModelConfig
from jointsal.errors import ConfigError
from jointsal.nn import LayerNorm
from jointsal.transformer import EncoderBlock, MultiHeadSelfAttention, TransformerEncoder, mhsa, transformer_forward


def _cfg(D=8, heads=2, depth=2):
    return ModelConfig(widths=(4, 4, 8, 8), embed_dim=D, num_heads=heads, depth=depth, decoder_width=4, seg_width=4, mam_reduction=2)


def make_identity(block: EncoderBlock):
    block.attn.value.weight.data[:] = 0
    block.attn.value.bias.data[:] = 0
    block.attn.out.bias.data[:] = 0
    block.fc2.weight.data[:] = 0
    block.fc2.bias.data[:] = 0


def test_heads_must_divide():
    with pytest.raises(ConfigError):
        MultiHeadSelfAttention(np.random.default_rng(0), 10, 4)


def test_attention_rows_normalized(rng):
    att = MultiHeadSelfAttention(np.random.default_rng(0), 8, 2)
    att(Tensor(rng.standard_normal((3, 7, 8)) * 3))
    a = att.last_attention
    assert a.shape == (3, 2, 7, 7)
    assert np.all(a >= 0)
    assert np.abs(a.sum(-1) - 1).max() <= 1e-12


def test_single_token_attention(rng):
    att = MultiHeadSelfAttention(np.random.default_rng(0), 8, 2)
    x = rng.standard_normal((2, 1, 8))
    want = att.out(att.value(Tensor(x))).data
    assert np.allclose(mhsa(Tensor(x), att).data, want, atol=1e-14)


def test_zero_value_gives_out_bias(rng):
    att = MultiHeadSelfAttention(np.random.default_rng(0), 8, 2)
    att.value.weight.data[:] = 0
    att.value.bias.data[:] = 0
    att.out.bias.data[:] = rng.standard_normal(8)
    y = mhsa(Tensor(rng.standard_normal((2, 5, 8))), att).data
    assert np.allclose(y, np.broadcast_to(att.out.bias.data, y.shape), atol=0)


def test_mhsa_permutation_equivariance(rng):
    att = MultiHeadSelfAttention(np.random.default_rng(0), 8, 4)
    x = rng.standard_normal((2, 9, 8))
    y = mhsa(Tensor(x), att).data
    for _ in range(5):
        p = rng.permutation(9)
        assert np.allclose(mhsa(Tensor(x[:, p]), att).data, y[:, p], atol=1e-12)


def test_identity_block(rng):
    block = EncoderBlock(np.random.default_rng(0), 8, 2, 4)
    make_identity(block)
    x = rng.standard_normal((2, 6, 8))
    out = block(Tensor(x)).data
    assert out.shape == x.shape
    assert np.abs(out - x).max() < 1e-10


def test_identity_stack_is_final_ln(rng):
    enc = TransformerEncoder(_cfg(depth=1), np.random.default_rng(0))
    make_identity(enc.blocks[0])
    x = rng.standard_normal((1, 6, 8))
    ln = LayerNorm(8)
    f = enc(PatchSequence(Tensor(x), (2, 3)))
    assert f.shape == (1, 8, 2, 3)
    assert np.abs(flatten_tokens(f).data - ln(Tensor(x)).data).max() < 1e-10


def test_depth_zero_rejected():
    with pytest.raises(ConfigError):
        TransformerEncoder(_cfg(), np.random.default_rng(0), depth=0)
    with pytest.raises(ConfigError):
        transformer_forward(PatchSequence(Tensor(np.zeros((1, 4, 8))), (2, 2)), [], LayerNorm(8))


def test_stack_permutation_equivariance(rng):
    enc = TransformerEncoder(_cfg(), np.random.default_rng(0))
    x = rng.standard_normal((2, 12, 8))
    y = enc.encode_tokens(Tensor(x)).data
    for _ in range(20):
        p = rng.permutation(12)
        assert np.allclose(enc.encode_tokens(Tensor(x[:, p])).data, y[:, p], atol=1e-12)


def test_two_block_gradient(rng):
    enc = TransformerEncoder(_cfg(), np.random.default_rng(0))
    check_gradients(lambda t: enc.encode_tokens(t), [rng.standard_normal((1, 6, 8))], rng)


def test_block_parameter_gradient(rng):
    block = EncoderBlock(np.random.default_rng(0), 8, 2, 2)
    x = Tensor(rng.standard_normal((1, 4, 8)))
    w = block.attn.query.weight
    base = w.data.copy()

    def f(wt):
        block.attn.query.weight = wt
        return block(x)

    check_gradients(f, [base], rng)
    block.attn.query.weight = w
