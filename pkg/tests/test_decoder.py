import numpy as np
import pytest

from conftest import numeric_grad, rel_error
from jointsal.autodiff import Tensor
from jointsal.backbone import FeaturePyramid
from jointsal.config import ABLATION_CHAIN, ModelConfig
from jointsal.decoder import SaliencyDecoder
from jointsal.errors import ConfigError, DimensionError

SMALL = dict(widths=(4, 4, 8, 8), blocks_per_stage=1, embed_dim=8, num_heads=2, decoder_width=4, seg_width=4)


def _inputs(cfg, rng, B=1):
    pyr = FeaturePyramid(*[Tensor(rng.standard_normal((B, c, h, w))) for c, (h, w) in zip(cfg.widths, cfg.stage_hw)])
    h4, w4 = cfg.stage_hw[3]
    g = Tensor(rng.standard_normal((B, cfg.embed_dim, h4, w4)))
    return pyr, g


def test_shapes_64(rng):
    cfg = ModelConfig(input_height=64, input_width=64, **SMALL)
    dec = SaliencyDecoder(cfg, np.random.default_rng(0))
    pyr, g = _inputs(cfg, rng)
    out = dec(pyr, g, g, (64, 64), (64, 64))
    assert len(out.stages) == 4 and out.supervised == 4
    assert all(m.shape == (1, 64, 64) for m in out.stages)
    assert out.final is out.stages[0]


def test_gt_resolution_differs(rng):
    cfg = ModelConfig(**SMALL)
    dec = SaliencyDecoder(cfg, np.random.default_rng(0))
    pyr, g = _inputs(cfg, rng, B=2)
    out = dec(pyr, g, g, (48, 64), (30, 40))
    assert all(m.shape == (2, 30, 40) for m in out.stages)


def test_zero_fusion_constant_heads(rng):
    cfg = ModelConfig(**SMALL)
    dec = SaliencyDecoder(cfg, np.random.default_rng(0))
    for k, st in enumerate(dec.stages):
        st.fuse.weight.data[:] = 0
        st.head.bias.data[:] = 0.25 * (k + 1)
    pyr, g = _inputs(cfg, rng)
    out = dec(pyr, g, g, (48, 64))
    for k, m in enumerate(out.stages):
        assert np.all(m.data == 0.25 * (k + 1))


def test_grid_mismatch_names_stage(rng):
    cfg = ModelConfig(**SMALL)
    dec = SaliencyDecoder(cfg, np.random.default_rng(0))
    pyr, _ = _inputs(cfg, rng)
    bad = Tensor(np.zeros((1, 8, 3, 3)))
    with pytest.raises(DimensionError, match="stage 4"):
        dec(pyr, bad, bad, (48, 64))


def test_stage1_gradient_wrt_c1():
    rng = np.random.default_rng(3)
    cfg = ModelConfig(**SMALL)
    dec = SaliencyDecoder(cfg, np.random.default_rng(0))
    pyr, g = _inputs(cfg, rng)
    c1 = pyr.c1.data.copy()
    x = Tensor(c1.copy(), requires_grad=True)
    dec(FeaturePyramid(x, pyr.c2, pyr.c3, pyr.c4), g, g, (48, 64)).final.mean().backward()
    coords = rng.choice(c1.size, 30, replace=False)

    def f(a):
        return float(dec(FeaturePyramid(Tensor(a), pyr.c2, pyr.c3, pyr.c4), g, g, (48, 64)).final.data.mean())

    num = numeric_grad(f, [c1], 0, coords=coords)
    assert rel_error(x.grad.reshape(-1)[coords], num) < 1e-4


def test_ablation_outputs(rng):
    base = ModelConfig.for_ablation("baseline", **SMALL)
    dec = SaliencyDecoder(base, np.random.default_rng(0))
    pyr, g = _inputs(base, rng)
    out = dec(pyr, g, g, (48, 64))
    assert out.supervised == 1 and len(out.supervised_stages) == 1
    ms = ModelConfig.for_ablation("multi_supervision", **SMALL)
    assert SaliencyDecoder(ms, np.random.default_rng(0))(pyr, g, g, (48, 64)).supervised == 4
    dec_only = ModelConfig.for_ablation("decoder", **SMALL)
    assert SaliencyDecoder(dec_only, np.random.default_rng(0))(pyr, g, g, (48, 64)).supervised == 1


def test_skip_connection_adds_embed_dim_channels():
    a = SaliencyDecoder(ModelConfig.for_ablation("decoder", **SMALL), np.random.default_rng(0))
    b = SaliencyDecoder(ModelConfig.for_ablation("skip_connection", **SMALL), np.random.default_rng(0))
    for k in range(3):
        assert b.stages[k].fuse.weight.shape[1] - a.stages[k].fuse.weight.shape[1] == SMALL["embed_dim"]
        assert b.stages[k].fuse.weight.shape[0] == a.stages[k].fuse.weight.shape[0]
        assert b.stages[k].head.weight.shape == a.stages[k].head.weight.shape
    assert b.stages[3].fuse.weight.shape == a.stages[3].fuse.weight.shape


def test_inconsistent_flags_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(mam=True, multi_task=False)
    assert [ModelConfig.for_ablation(l).ablation_level for l in ABLATION_CHAIN] == list(ABLATION_CHAIN)


def test_unsupervised_heads_get_no_gradient(rng):
    from jointsal.losses import joint_loss

    cfg = ModelConfig.for_ablation("skip_connection", **SMALL)
    dec = SaliencyDecoder(cfg, np.random.default_rng(0))
    pyr, g = _inputs(cfg, rng)
    out = dec(pyr, g, g, (48, 64))
    joint_loss(out.supervised_stages, rng.random((1, 48, 64))).total.backward()
    assert np.abs(dec.stages[0].head.weight.grad).sum() > 0
    for st in dec.stages[1:]:
        assert st.head.weight.grad is None or not st.head.weight.grad.any()


def test_deterministic(rng):
    cfg = ModelConfig(**SMALL)
    pyr, g = _inputs(cfg, rng)
    a = SaliencyDecoder(cfg, np.random.default_rng(0))(pyr, g, g, (48, 64)).final.data
    b = SaliencyDecoder(cfg, np.random.default_rng(0))(pyr, g, g, (48, 64)).final.data
    assert np.array_equal(a, b)
