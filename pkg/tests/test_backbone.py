import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import check_gradients, numeric_grad, rel_error
from jointsal.autodiff import Tensor
from jointsal.backbone import Backbone, PatchEmbedding, PreActBlock, embed_patches, flatten_tokens, unflatten_tokens
from jointsal.config import ModelConfig
from jointsal.errors import ConfigError
from jointsal.nn import Conv2d, parameter

SMALL = dict(widths=(4, 4, 8, 8), blocks_per_stage=1, embed_dim=8, num_heads=2, decoder_width=4, seg_width=4)


def test_stage_grids_64():
    cfg = ModelConfig(input_height=64, input_width=64, **SMALL)
    pyr = Backbone(cfg, np.random.default_rng(0))(Tensor(np.zeros((1, 3, 64, 64))))
    assert [c.shape[2:] for c in pyr] == [(16, 16), (8, 8), (4, 4), (2, 2)]
    assert [c.shape[1] for c in pyr] == list(cfg.widths)


def test_desk_input_grids():
    cfg = ModelConfig(**SMALL)
    pyr = Backbone(cfg, np.random.default_rng(0))(Tensor(np.zeros((1, 3, 48, 64))))
    assert [c.shape[2:] for c in pyr] == [(12, 16), (6, 8), (3, 4), (2, 2)]
    assert [c.shape[2:] for c in pyr] == cfg.stage_hw


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4))
def test_stride_relations(h, w):
    H, W = 32 * h, 32 * w
    cfg = ModelConfig(input_height=H, input_width=W, **SMALL)
    pyr = Backbone(cfg, np.random.default_rng(0))(Tensor(np.zeros((1, 3, H, W))))
    grids = [c.shape[2:] for c in pyr]
    assert grids[0] == (H // 4, W // 4)
    for a, b in zip(grids, grids[1:]):
        assert b == (-(-a[0] // 2), -(-a[1] // 2))


def test_indivisible_input_rejected():
    bb = Backbone(ModelConfig(**SMALL), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        bb(Tensor(np.zeros((1, 3, 40, 64))))


def test_zero_input_zero_final_blocks_finite():
    cfg = ModelConfig(**SMALL)
    bb = Backbone(cfg, np.random.default_rng(0))
    bb.stem1.bias.data[:] = 0.3
    for blocks in bb.stages:
        blocks[-1].conv2.weight.data[:] = 0.0
    pyr = bb(Tensor(np.zeros((1, 3, 48, 64))))
    for c in pyr:
        assert np.all(np.isfinite(c.data))
    # stem bias is the only non-zero source
    bb.stem1.bias.data[:] = 0.0
    assert all(np.all(c.data == 0) for c in bb(Tensor(np.zeros((1, 3, 48, 64)))))


def test_residual_identity_with_zero_weights():
    rng = np.random.default_rng(1)
    block = PreActBlock(rng, 5, 5)
    block.conv1.weight.data[:] = 0
    block.conv2.weight.data[:] = 0
    x = Tensor(rng.standard_normal((2, 5, 6, 7)))
    assert np.array_equal(block(x).data, x.data)


def test_block_gradients(rng):
    block = PreActBlock(np.random.default_rng(3), 2, 3, stride=2)
    check_gradients(lambda x: block(x), [rng.standard_normal((1, 2, 6, 5))], rng)


def test_backbone_c4_gradient_wrt_image():
    cfg = ModelConfig(input_height=32, input_width=32, **SMALL)
    bb = Backbone(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(5)
    img = rng.standard_normal((1, 3, 32, 32))
    x = Tensor(img.copy(), requires_grad=True)
    bb(x).c4.sum().backward()
    coords = rng.choice(img.size, 40, replace=False)
    num = numeric_grad(lambda a: float(bb(Tensor(a)).c4.data.sum()), [img], 0, coords=coords)
    assert rel_error(x.grad.reshape(-1)[coords], num) < 1e-4


def test_flatten_roundtrip_and_order():
    x = np.arange(2 * 3 * 2 * 3, dtype=float).reshape(2, 3, 2, 3)
    tok = flatten_tokens(Tensor(x))
    assert tok.shape == (2, 6, 3)
    assert np.array_equal(tok.data[0, 4], x[0, :, 1, 1])
    assert np.array_equal(unflatten_tokens(tok, (2, 3)).data, x)


def _identity_embed(c):
    conv = Conv2d(np.random.default_rng(0), c, c, 1, padding=0)
    conv.weight.data[:] = np.eye(c)[:, :, None, None]
    return conv


def test_embed_identity_is_pure_reshape():
    rng = np.random.default_rng(2)
    c4 = rng.standard_normal((2, 4, 2, 3))
    seq = embed_patches(Tensor(c4), _identity_embed(4), parameter(np.zeros((6, 4))), 0.0, True)
    assert np.array_equal(seq.tokens.data, flatten_tokens(Tensor(c4)).data)
    assert np.array_equal(unflatten_tokens(seq.tokens, seq.origin_hw).data, c4)


def test_embed_swap_pixels_swaps_tokens():
    rng = np.random.default_rng(3)
    c4 = rng.standard_normal((1, 4, 2, 3))
    conv = Conv2d(rng, 4, 8, 1, padding=0)
    pos = parameter(np.zeros((6, 8)))
    a = embed_patches(Tensor(c4), conv, pos, 0.0, False).tokens.data
    swapped = c4.copy()
    swapped[:, :, 0, 1], swapped[:, :, 1, 2] = c4[:, :, 1, 2], c4[:, :, 0, 1]
    b = embed_patches(Tensor(swapped), conv, pos, 0.0, False).tokens.data
    assert np.array_equal(a[:, 1], b[:, 5]) and np.array_equal(a[:, 5], b[:, 1])


def test_embed_shapes_and_errors():
    rng = np.random.default_rng(4)
    conv = Conv2d(rng, 128, 32, 1, padding=0)
    seq = embed_patches(Tensor(rng.standard_normal((2, 128, 2, 3))), conv, parameter(np.zeros((6, 32))), 0.1, False)
    assert seq.tokens.shape == (2, 6, 32)
    with pytest.raises(ConfigError):
        embed_patches(Tensor(np.zeros((2, 128, 2, 3))), conv, parameter(np.zeros((5, 32))), 0.0, False)
    with pytest.raises(ConfigError):
        embed_patches(Tensor(np.zeros((2, 128, 2, 3))), Conv2d(rng, 128, 32, 3), parameter(np.zeros((6, 32))), 0.0, False)


def test_patch_embedding_dropout_drops_channels():
    cfg = ModelConfig(dropout=0.5, **SMALL)
    emb = PatchEmbedding(cfg, np.random.default_rng(0))
    c4 = Tensor(np.random.default_rng(1).standard_normal((2, 8, 2, 2)))
    tok = emb(c4, np.random.default_rng(9)).tokens.data
    clean = emb.eval()(c4).tokens.data
    for b in range(2):
        for d in range(cfg.embed_dim):
            col = tok[b, :, d]
            assert np.all(col == 0) or np.allclose(col, 2 * clean[b, :, d])
