"""Fusion network tests.  Attention and recursion outputs are compared against
plain numpy re-computations that read the module's weights and batch-norm
running statistics (eval mode) and nothing else."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from dpf_nutrition.errors import ConfigError, ContractError, ShapeError
from dpf_nutrition.model import (
    ABLATION_INDEX,
    CrossModalAttention,
    ModelConfig,
    MultiScaleFusion,
    build_model,
    cab_fuse,
    channel_attention,
    multiscale_fuse,
    prepare_batch,
    predict_nutrients,
    spatial_attention,
)


def _randomize_bn(module, seed):
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            n = m.num_features
            m.running_mean.copy_(torch.randn(n, generator=g, dtype=torch.float64).to(m.running_mean.dtype))
            m.running_var.copy_((torch.rand(n, generator=g, dtype=torch.float64) + 0.5).to(m.running_var.dtype))
            with torch.no_grad():
                m.weight.copy_(torch.randn(n, generator=g, dtype=torch.float64).to(m.weight.dtype))
                m.bias.copy_(torch.randn(n, generator=g, dtype=torch.float64).to(m.bias.dtype))


def _np(t):
    return t.detach().double().numpy()


def _bn(x, bn):
    """x: (C, ...) channel-first, eval-mode batch norm."""
    shape = (-1,) + (1,) * (x.ndim - 1)
    mean, var = _np(bn.running_mean).reshape(shape), _np(bn.running_var).reshape(shape)
    w, b = _np(bn.weight).reshape(shape), _np(bn.bias).reshape(shape)
    return (x - mean) / np.sqrt(var + bn.eps) * w + b


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _conv3x3_single(x, k):
    """One-channel 3x3 cross-correlation, zero padding 1; x: H x W, k: 3 x 3."""
    h, w = x.shape
    p = np.zeros((h + 2, w + 2))
    p[1:-1, 1:-1] = x
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            out[i, j] = np.sum(p[i:i + 3, j:j + 3] * k)
    return out


def oracle_channel(block, r, d):
    s = (r + d).mean(axis=(1, 2))                      # C
    z = _np(block.ca_conv.weight)[:, :, 0, 0] @ s       # C
    z = _bn(z, block.ca_bn)
    return _sigmoid(np.maximum(z, 0))


def oracle_spatial(block, r, d):
    s = (r + d).mean(axis=0)                            # H x W
    z = _conv3x3_single(s, _np(block.sa_conv.weight)[0, 0])
    z = _bn(z[None], block.sa_bn)[0]
    return _sigmoid(np.maximum(z, 0))


def oracle_cab(block, r, d):
    ca = oracle_channel(block, r, d)[:, None, None]
    sa = oracle_spatial(block, r, d)[None]
    stacked = np.concatenate([r * ca * sa, d * ca * sa], axis=0)   # 2C x H x W
    w = _np(block.proj.weight)[:, :, 0, 0]
    b = _np(block.proj.bias)
    return np.einsum("oc,chw->ohw", w, stacked) + b[:, None, None]


def _block(channels, seed):
    torch.manual_seed(seed)
    block = CrossModalAttention(channels)
    _randomize_bn(block, seed + 100)
    return block.eval()


@pytest.mark.parametrize("channels, h, w, seed", [(1, 1, 1, 0), (3, 4, 5, 1), (8, 6, 6, 2), (5, 2, 7, 3)])
def test_cab_matches_numpy_oracle(channels, h, w, seed):
    block = _block(channels, seed)
    g = torch.Generator().manual_seed(seed)
    r = torch.randn(2, channels, h, w, generator=g)
    d = torch.randn(2, channels, h, w, generator=g)
    with torch.no_grad():
        ca = channel_attention(block, r, d)
        sa = spatial_attention(block, r, d)
        out = cab_fuse(block, r, d)
    for b in range(2):
        rn, dn = _np(r[b]), _np(d[b])
        np.testing.assert_allclose(_np(ca[b, :, 0, 0]), oracle_channel(block, rn, dn), atol=1e-5)
        np.testing.assert_allclose(_np(sa[b, 0]), oracle_spatial(block, rn, dn), atol=1e-5)
        np.testing.assert_allclose(_np(out[b]), oracle_cab(block, rn, dn), atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.integers(1, 6), st.integers(0, 1000), st.floats(0.1, 4))
def test_attention_symmetric_and_in_open_interval(c, h, w, seed, scale):
    block = _block(c, seed)
    g = torch.Generator().manual_seed(seed)
    r = torch.randn(1, c, h, w, generator=g, dtype=torch.float64) * scale
    d = torch.randn(1, c, h, w, generator=g, dtype=torch.float64) * scale
    block = block.double()
    with torch.no_grad():
        ca, sa = block.channel_attention(r, d), block.spatial_attention(r, d)
        assert torch.equal(ca, block.channel_attention(d, r))
        assert torch.equal(sa, block.spatial_attention(d, r))
    for t in (ca, sa):
        assert (t > 0).all() and (t < 1).all()


def test_cab_shape_preservation():
    block = CrossModalAttention(256).eval()
    r = torch.randn(2, 256, 84, 112)
    with torch.no_grad():
        assert block(r, torch.randn_like(r)).shape == r.shape


def test_cab_shape_mismatch():
    block = CrossModalAttention(4)
    with pytest.raises(ShapeError):
        block(torch.zeros(1, 4, 3, 3), torch.zeros(1, 4, 3, 4))


def test_zero_attention_leaves_bias_response():
    block = _block(4, 7)
    r, d = torch.randn(1, 4, 3, 3), torch.randn(1, 4, 3, 3)
    zero_ca = torch.zeros(1, 4, 1, 1)
    with torch.no_grad():
        out = block.gate(r, d, zero_ca, block.spatial_attention(r, d))
    expected = block.proj.bias.detach().view(1, 4, 1, 1).expand_as(out)
    assert torch.allclose(out, expected)


def test_gates_shared_between_modalities():
    """Swapping modalities swaps the two halves of the projection input."""
    block = _block(3, 9)
    r, d = torch.randn(1, 3, 4, 4), torch.randn(1, 3, 4, 4)
    with torch.no_grad():
        w = block.proj.weight.clone()
        swapped = torch.cat([w[:, 3:], w[:, :3]], dim=1)
        a = block(r, d)
        block.proj.weight.copy_(swapped)
        b = block(d, r)
    assert torch.allclose(a, b, atol=1e-6)


# -------------------------------------------------------------- multi-scale


def _fusion_levels(seed, channels=(4, 6, 8, 8, 10), sizes=(16, 16, 8, 4, 2)):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(1, c, s, s, generator=g, dtype=torch.float64) for c, s in zip(channels, sizes)]


def test_multiscale_recursion_matches_unrolled_reference():
    torch.manual_seed(0)
    fusion = MultiScaleFusion((4, 6, 8, 8, 10)).double()
    _randomize_bn(fusion, 5)
    fusion.eval()
    cs = _fusion_levels(1)
    with torch.no_grad():
        out = fusion(cs)
        res = fusion.res
        f0 = cs[0]
        f1 = cs[1] + res[0](f0)
        f2 = cs[2] + res[1](f1)
        f3 = cs[3] + res[2](f2)
        f4 = cs[4] + res[3](f3)
    for got, want in zip(out, (f0, f1, f2, f3, f4)):
        torch.testing.assert_close(got, want, atol=1e-5, rtol=0)
    with torch.no_grad():
        torch.testing.assert_close(multiscale_fuse(fusion, cs), f4)


def test_raw_recursion_uses_previous_unfused_level():
    torch.manual_seed(0)
    fusion = MultiScaleFusion((4, 6, 8, 8, 10), recursion_input="raw").double().eval()
    cs = _fusion_levels(2)
    with torch.no_grad():
        out = fusion(cs)
        torch.testing.assert_close(out[3], cs[3] + fusion.res[2](cs[2]))


def test_zero_residual_gives_fused_equal_to_cab_outputs():
    fusion = MultiScaleFusion((4, 6, 8, 8, 10)).double().eval()
    for block in fusion.res:
        torch.nn.init.zeros_(block.body[-1].weight)
        torch.nn.init.zeros_(block.shortcut[-1].weight)
        torch.nn.init.zeros_(block.shortcut[-1].bias)
        torch.nn.init.zeros_(block.body[-1].bias)
    cs = _fusion_levels(3)
    with torch.no_grad():
        for f, c in zip(fusion(cs), cs):
            assert torch.equal(f, c)


def test_wrong_level_count():
    with pytest.raises(ShapeError):
        MultiScaleFusion((4, 6, 8, 8, 10))(_fusion_levels(0)[:4])


def test_bottleneck_output_grid():
    fusion = MultiScaleFusion((64, 256, 512, 1024, 2048)).eval()
    x = torch.randn(1, 64, 84, 112)
    with torch.no_grad():
        y = fusion.res[0](x)
        assert y.shape == (1, 256, 84, 112)
        assert fusion.res[3](torch.randn(1, 1024, 21, 28)).shape == (1, 2048, 11, 14)


# -------------------------------------------------------------- full model


def _batch(cfg, n=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    h, w = cfg.image_size
    return torch.rand(n, 3, h, w, generator=g), torch.rand(n, 3, h, w, generator=g)


@pytest.mark.parametrize("mode", sorted(set(ABLATION_INDEX.values())))
def test_every_mode_outputs_b_by_5(mode):
    cfg = tiny_config(ablation_mode=mode)
    model = build_model(cfg, seed=0).eval()
    rgb, depth = _batch(cfg, 3)
    with torch.no_grad():
        assert model(rgb, depth).shape == (3, 5)


def test_rgb_only_ignores_depth():
    cfg = tiny_config(ablation_mode="rgb_only")
    model = build_model(cfg, seed=0).eval()
    rgb, depth = _batch(cfg)
    with torch.no_grad():
        assert torch.equal(model(rgb, depth), model(rgb, depth * 7 + 1))
        assert torch.equal(model(rgb, depth), model(rgb, None))


def test_depth_only_ignores_rgb():
    cfg = tiny_config(ablation_mode="depth_only")
    model = build_model(cfg, seed=0).eval()
    rgb, depth = _batch(cfg)
    with torch.no_grad():
        assert torch.equal(model(rgb, depth), model(None, depth))


def test_direct_fusion_concatenates_pooled_level4():
    cfg = tiny_config(ablation_mode="direct_fusion")
    model = build_model(cfg, seed=0).eval()
    rgb, depth = _batch(cfg)
    with torch.no_grad():
        feats = model.forward_features(rgb, depth)
    expected = torch.cat([feats["R4"].mean(dim=(2, 3)), feats["D4"].mean(dim=(2, 3))], dim=1)
    assert torch.equal(feats["pooled"], expected)
    assert not hasattr(model, "fusers")


def test_streams_have_independent_weights():
    cfg = tiny_config()
    model = build_model(cfg, seed=0).eval()
    x, _ = _batch(cfg)
    with torch.no_grad():
        feats = model.forward_features(x, x)
    assert not torch.equal(feats["R4"], feats["D4"])
    rgb_params = {id(p) for p in model.rgb_backbone.parameters()}
    assert not rgb_params & {id(p) for p in model.depth_backbone.parameters()}


def test_identity_attention_reduces_cab_model_to_plain_multiscale():
    """With gates pinned to 1 the attention model computes exactly the no-attention model."""
    cfg_e, cfg_d = tiny_config(ablation_mode="multiscale_cab"), tiny_config(ablation_mode="multiscale")
    model_e, model_d = build_model(cfg_e, seed=0).eval(), build_model(cfg_d, seed=0).eval()
    model_d.load_state_dict(model_e.state_dict(), strict=False)
    for fuser in model_e.fusers:
        fuser.channel_attention = lambda r, d: torch.ones(1)
        fuser.spatial_attention = lambda r, d: torch.ones(1)
    rgb, depth = _batch(cfg_e)
    with torch.no_grad():
        assert torch.allclose(model_e(rgb, depth), model_d(rgb, depth))


def test_input_contract_errors():
    model = build_model(tiny_config(), seed=0)
    rgb, depth = _batch(tiny_config())
    with pytest.raises(ContractError):
        model(rgb, None)
    with pytest.raises(ContractError):
        model(rgb[:, :, :16], depth[:, :, :16])
    with pytest.raises(ContractError):
        model(rgb[:, :1], depth)


def test_config_validation_and_hash():
    with pytest.raises(ConfigError) as exc:
        ModelConfig(backbone="vgg")
    assert exc.value.field == "model.backbone"
    with pytest.raises(ConfigError):
        ModelConfig(ablation_mode="late")
    a, b = tiny_config(), tiny_config(head_hidden=9)
    assert a.config_hash() == tiny_config().config_hash() != b.config_hash()
    assert ModelConfig.from_dict(a.to_dict()) == a


def test_predictions_clamped_for_reporting(small_scenes):
    cfg = tiny_config()
    model = build_model(cfg, seed=0)
    with torch.no_grad():
        for head in model.heads:
            head.bias.fill_(-1e3)
    preds = predict_nutrients(model, small_scenes[:2])
    assert all(v == 0 for p in preds for v in p.as_array())


def test_prepare_batch_layout(small_scenes):
    cfg = tiny_config()
    rgb, depth, y = prepare_batch(small_scenes[:3], cfg)
    assert rgb.shape == depth.shape == (3, 3, 32, 32)
    assert torch.equal(depth[:, 0], depth[:, 2])
    np.testing.assert_allclose(y[1].numpy(), small_scenes[1].target.as_array(), rtol=1e-6)
