import numpy as np
import pytest

from dqnet.autograd import Tensor
from dqnet.cnn import BasicBlock, Bottleneck, CnnConfig, ResNet
from dqnet.errors import ConfigError, DimensionError
from dqnet.vit import TokenGrid, TransformerLayer, VisionTransformer, VitConfig, multi_head_attention


def test_patch_embed_matches_per_patch_projection(rng):
    cfg = VitConfig(image_size=16, patch_size=8, embed_dim=6, depth=0, heads=2)
    vit = VisionTransformer(cfg, rng).astype(np.float64)
    img = rng.random((1, 3, 16, 16))
    z = vit.patch_embed(Tensor(img))
    assert (z.h, z.w) == (2, 2)
    for gy in range(2):
        for gx in range(2):
            patch = img[0, :, gy * 8 : gy * 8 + 8, gx * 8 : gx * 8 + 8].reshape(-1)  # channel, row, column
            ref = patch @ vit.patch_weight.data + vit.patch_bias.data + vit.pos.data[gy * 2 + gx]
            np.testing.assert_allclose(z.tokens.data[0, gy * 2 + gx], ref, rtol=1e-12)


def test_vit_output_shape(rng):
    vit = VisionTransformer(VitConfig(image_size=32, patch_size=8, embed_dim=8, depth=2, heads=2), rng)
    z = vit(Tensor(rng.random((2, 3, 32, 32), dtype=np.float32)))
    assert z.tokens.shape == (2, 16, 8) and (z.h, z.w) == (4, 4)


def test_vit_rejects_indivisible_config():
    with pytest.raises(ConfigError):
        VitConfig(image_size=30, patch_size=8)
    with pytest.raises(ConfigError):
        VitConfig(embed_dim=10, heads=4)


def test_vit_rejects_wrong_image_size(rng):
    vit = VisionTransformer(VitConfig(image_size=32, patch_size=8, embed_dim=8, depth=0, heads=2), rng)
    with pytest.raises(DimensionError):
        vit(Tensor(np.zeros((1, 3, 16, 16))))


def test_token_grid_map_roundtrip(rng):
    t = Tensor(rng.random((2, 12, 5)))
    g = TokenGrid(t, 3, 4)
    back = TokenGrid.from_map(g.to_map())
    np.testing.assert_array_equal(back.tokens.data, t.data)
    assert g.to_map().data[1, 2, 1, 3] == t.data[1, 1 * 4 + 3, 2]


def test_multi_head_attention_matches_per_head_loop(rng):
    q, k, v = (rng.standard_normal((1, 5, 6)) for _ in range(3))
    out = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), heads=3).data[0]
    for h in range(3):
        sl = slice(2 * h, 2 * h + 2)
        logits = q[0, :, sl] @ k[0, :, sl].T / np.sqrt(2)
        a = np.exp(logits - logits.max(1, keepdims=True))
        a /= a.sum(1, keepdims=True)
        np.testing.assert_allclose(out[:, sl], a @ v[0, :, sl], rtol=1e-10)


def test_transformer_layer_is_residual(rng):
    layer = TransformerLayer(8, 2, 2.0, rng).astype(np.float64)
    for lin in (layer.proj, layer.fc2):
        lin.weight.data[:] = 0
        lin.bias.data[:] = 0
    z = Tensor(rng.standard_normal((1, 4, 8)))
    np.testing.assert_array_equal(layer(TokenGrid(z, 2, 2)).tokens.data, z.data)


@pytest.mark.parametrize("block", ["basic", "bottleneck"])
def test_resnet_stage_scales_and_widths(rng, block):
    cfg = CnnConfig(widths=(8, 8, 16, 16, 32), block=block)
    net = ResNet(cfg, rng)
    feats = net(Tensor(rng.random((2, 3, 64, 64), dtype=np.float32)))
    for s in (2, 3, 4, 5):
        assert feats[s].values.shape == (2, cfg.width(s), 64 // 2**s, 64 // 2**s)
        assert feats[s].stride == 2**s


def test_basic_block_identity_when_residual_zeroed(rng):
    blk = BasicBlock(4, 4, 1, rng).astype(np.float64)
    x = Tensor(np.abs(rng.standard_normal((2, 4, 6, 6))))
    blk.bn2.weight.data[:] = 0
    blk.bn2.bias.data[:] = 0
    np.testing.assert_allclose(blk(x).data, x.data)  # relu(x + 0) with x >= 0


def test_bottleneck_inner_width(rng):
    blk = Bottleneck(16, 32, 2, rng)
    assert blk(Tensor(rng.random((2, 16, 8, 8), dtype=np.float32))).shape == (2, 32, 4, 4)


def test_cnn_config_validation():
    with pytest.raises(ConfigError):
        CnnConfig(widths=(1, 2, 3))
    with pytest.raises(ConfigError):
        CnnConfig(block="dense")


# -- degenerate and brute-force cases ---------------------------------------------------
def small_vit(rng, depth=1):
    return VisionTransformer(VitConfig(image_size=16, patch_size=8, embed_dim=4, depth=depth, heads=2, mlp_ratio=2.0), rng).astype(np.float64)


def test_zero_image_gives_position_embeddings(rng):
    vit = small_vit(rng)
    z = vit.patch_embed(Tensor(np.zeros((1, 3, 16, 16))))
    np.testing.assert_array_equal(z.tokens.data[0], vit.pos.data)


def test_depth_zero_is_patch_embedding(rng):
    vit = small_vit(rng, depth=0)
    img = Tensor(rng.random((1, 3, 16, 16)))
    np.testing.assert_array_equal(vit(img).tokens.data, vit.patch_embed(img).tokens.data)


def test_zero_block_weights_reduce_to_patch_embedding(rng):
    vit = small_vit(rng, depth=2)
    for name, p in vit.named_parameters():
        if name.startswith("layers."):
            p.data[...] = 0.0
    img = Tensor(rng.random((1, 3, 16, 16)))
    np.testing.assert_array_equal(vit(img).tokens.data, vit.patch_embed(img).tokens.data)


def test_single_token_attention_is_value_projection(rng):
    layer = TransformerLayer(4, 2, 2.0, rng).astype(np.float64)
    x = Tensor(rng.standard_normal((1, 1, 4)))
    expect = (x.data @ layer.v.weight.data + layer.v.bias.data) @ layer.proj.weight.data + layer.proj.bias.data
    np.testing.assert_allclose(layer.attention(x).data, expect, rtol=1e-12)


def test_layer_matches_step_by_step_evaluation(rng):
    from math import erf, sqrt

    layer = TransformerLayer(4, 2, 2.0, rng).astype(np.float64)
    for p in layer.parameters():  # non-trivial norms and biases
        p.data = p.data + rng.standard_normal(p.shape) * 0.1
    z = rng.standard_normal((4, 4))

    def ln(x, g, b):
        out = np.empty_like(x)
        for i, row in enumerate(x):
            m = sum(row) / len(row)
            v = sum((r - m) ** 2 for r in row) / len(row)
            out[i] = [(r - m) / sqrt(v + 1e-5) * gg + bb for r, gg, bb in zip(row, g, b)]
        return out

    def lin(x, mod):
        return x @ mod.weight.data + mod.bias.data

    h = ln(z, layer.norm1.weight.data, layer.norm1.bias.data)
    q, k, v = lin(h, layer.q), h @ layer.k.weight.data, lin(h, layer.v)
    heads = []
    for hd in range(2):
        sl = slice(2 * hd, 2 * hd + 2)
        out = np.zeros((4, 2))
        for i in range(4):
            logits = [sum(q[i, sl] * k[j, sl]) / sqrt(2) for j in range(4)]
            e = [np.exp(x - max(logits)) for x in logits]
            for j in range(4):
                out[i] += e[j] / sum(e) * v[j, sl]
        heads.append(out)
    a = lin(np.concatenate(heads, 1), layer.proj) + z
    hidden = lin(ln(a, layer.norm2.weight.data, layer.norm2.bias.data), layer.fc1)
    gelu = np.vectorize(lambda x: 0.5 * x * (1 + erf(x / sqrt(2))))
    ref = lin(gelu(hidden), layer.fc2) + a
    got = layer(TokenGrid(Tensor(z[None]), 2, 2)).tokens.data[0]
    assert np.max(np.abs(got - ref)) < 1e-6


def test_one_patch_reaches_every_output_token(rng):
    vit = small_vit(rng, depth=1)
    img = rng.random((1, 3, 16, 16))
    base = vit(Tensor(img)).tokens.data
    img[0, :, :8, :8] += 0.5  # top-left patch only
    moved = vit(Tensor(img)).tokens.data
    assert np.all(np.any(moved != base, axis=-1))


def test_token_count_constant_across_layers(rng):
    vit = small_vit(rng, depth=3)
    z = vit.patch_embed(Tensor(rng.random((1, 3, 16, 16))))
    for layer in vit.layers:
        z = layer(z)
        assert z.tokens.shape == (1, 4, 4)


def test_stem_output_scale(rng):
    net = ResNet(CnnConfig(), rng)
    assert net.stem(Tensor(rng.random((1, 3, 128, 128), dtype=np.float32))).values.shape == (1, 16, 64, 64)


def test_stem_zero_input_zero_output(rng):
    net = ResNet(CnnConfig(), rng).eval()
    assert np.all(net.stem(Tensor(np.zeros((1, 3, 32, 32), np.float32))).values.data == 0)


def test_stem_matches_composition(rng):
    from scipy import ndimage

    net = ResNet(CnnConfig(widths=(3, 4, 4, 4, 4)), rng).astype(np.float64).eval()
    net.stem_bn.running_mean[:] = rng.standard_normal(3)
    net.stem_bn.running_var[:] = rng.uniform(0.5, 2, 3)
    x = rng.random((3, 8, 8))
    w = net.stem_conv.weight.data
    conv = np.stack([sum(ndimage.correlate(x[c], w[o, c], mode="constant") for c in range(3)) for o in range(3)])
    bn = net.stem_bn
    norm = (conv - bn.running_mean[:, None, None]) / np.sqrt(bn.running_var[:, None, None] + 1e-5)
    act = np.maximum(norm * bn.weight.data[:, None, None] + bn.bias.data[:, None, None], 0)
    pooled = act.reshape(3, 4, 2, 4, 2).max(axis=(2, 4))
    assert np.max(np.abs(net.stem(Tensor(x[None])).values.data[0] - pooled)) < 1e-6


def test_zero_residual_branch_leaves_projected_input(rng):
    blk = BasicBlock(3, 4, 2, rng).astype(np.float64).eval()
    blk.conv2.weight.data[...] = 0
    x = Tensor(rng.standard_normal((1, 3, 8, 8)))
    proj = blk.shortcut_bn(blk.shortcut(x)).data
    np.testing.assert_allclose(blk(x).data, np.maximum(proj, 0), rtol=1e-12)


def test_stage_two_shape(rng):
    net = ResNet(CnnConfig(), rng)
    from dqnet.cnn import FeatureMap

    out = net.stage_forward(2, FeatureMap(Tensor(rng.random((1, 16, 64, 64), dtype=np.float32)), 2))
    assert out.values.shape == (1, 16, 32, 32) and out.stride == 4


def test_block_matches_composition(rng):
    from scipy import ndimage

    blk = BasicBlock(2, 3, 2, rng).astype(np.float64).eval()
    x = rng.standard_normal((2, 8, 8))

    def conv(inp, w, stride):
        full = np.stack([sum(ndimage.correlate(inp[c], w[o, c], mode="constant") for c in range(inp.shape[0])) for o in range(w.shape[0])])
        return full[:, ::stride, ::stride]  # 'same' correlation sampled every stride-th pixel

    def bn(v, m):
        return (v - m.running_mean[:, None, None]) / np.sqrt(m.running_var[:, None, None] + 1e-5) * m.weight.data[:, None, None] + m.bias.data[:, None, None]

    h = np.maximum(bn(conv(x, blk.conv1.weight.data, 2), blk.bn1), 0)
    r = bn(conv(h, blk.conv2.weight.data, 1), blk.bn2)
    s = bn(conv(x, blk.shortcut.weight.data, 2), blk.shortcut_bn)
    ref = np.maximum(r + s, 0)
    assert np.max(np.abs(blk(Tensor(x[None])).data[0] - ref)) < 1e-6
