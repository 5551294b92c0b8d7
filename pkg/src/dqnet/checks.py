"""Finite-difference gradient-check suites, grouped by component.

Every check runs in float64 and reduces the op's output to a scalar through a
fixed random weighting, so all output elements contribute to the gradient.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autograd as ag
from . import ops
from .autograd import Tensor
from .cnn import BasicBlock, CnnConfig
from .fusion import RBQ, StageAlign
from .gradcheck import GradReport, grad_check
from .losses import LossConfig, total_loss
from .model import DQNet, ModelConfig
from .vit import TokenGrid, TransformerLayer, VisionTransformer, VitConfig

PRIMITIVE_TOL = 1e-5
MODEL_TOL = 1e-3


def _leaf(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def _away_from(rng, shape, lo=0.2, hi=2.0):
    """Values with magnitude in ``[lo, hi]`` and random sign (no kinks nearby)."""
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _check(op: str, fn: Callable[..., Tensor], inputs: list[Tensor], rng, tol=PRIMITIVE_TOL, h=1e-6, samples=None):
    """One report per differentiable input of ``fn(*inputs)``."""
    weight = rng.standard_normal(fn(*inputs).shape)

    def scalar(_):
        return (fn(*inputs) * weight).sum()

    reports = []
    for i, x in enumerate(inputs):
        if x.requires_grad:
            name = op if len(inputs) == 1 else f"{op}[arg{i}]"
            reports.append(grad_check(scalar, x, h=h, tol=tol, op=name, samples=samples, rng=rng))
    return reports


def primitive_checks(seed: int) -> list[GradReport]:
    """Every differentiable primitive of the tensor layer."""
    rng = np.random.default_rng(seed)
    n = rng.standard_normal
    out = []
    a, b = _leaf(n((3, 4))), _leaf(n((4,)))
    out += _check("add", ag.add, [a, b], rng)
    out += _check("sub", ag.sub, [a, b], rng)
    out += _check("mul", ag.mul, [a, b], rng)
    out += _check("div", ag.div, [a, _leaf(_away_from(rng, (4,), 0.5))], rng)
    out += _check("power", lambda x: ag.power(x, 3.0), [_leaf(n((3, 4)))], rng)
    out += _check("exp", ag.exp, [_leaf(n((3, 4)))], rng)
    out += _check("log", ag.log, [_leaf(rng.uniform(0.5, 2.0, (3, 4)))], rng)
    out += _check("sqrt", ag.sqrt, [_leaf(rng.uniform(0.5, 2.0, (3, 4)))], rng)
    out += _check("abs", ag.tabs, [_leaf(_away_from(rng, (3, 4)))], rng)
    out += _check("sigmoid", ag.sigmoid, [_leaf(n((3, 4)))], rng)
    out += _check("relu", ag.relu, [_leaf(_away_from(rng, (3, 4)))], rng)
    out += _check("gelu", ag.gelu, [_leaf(n((3, 4)))], rng)
    out += _check("clip", lambda x: ag.clip(x, -0.5, 0.5), [_leaf(_away_from(rng, (3, 4), 0.05, 0.45) + rng.choice([0, 1.0], (3, 4)))], rng)
    out += _check("sum", lambda x: ag.tsum(x, axis=1, keepdims=True), [_leaf(n((3, 4)))], rng)
    out += _check("mean", lambda x: ag.mean(x, axis=0), [_leaf(n((3, 4)))], rng)
    out += _check("reshape", lambda x: ag.reshape(x, (2, 6)), [_leaf(n((3, 4)))], rng)
    out += _check("transpose", lambda x: ag.transpose(x, (2, 0, 1)), [_leaf(n((2, 3, 4)))], rng)
    out += _check("getitem", lambda x: x[1:, ::2], [_leaf(n((3, 4)))], rng)
    out += _check("take", lambda x: ag.take(x, np.array([2, 0, 2, 1]), axis=0), [_leaf(n((3, 4)))], rng)
    out += _check("concat", lambda x, y: ag.concat([x, y], axis=1), [_leaf(n((2, 3))), _leaf(n((2, 2)))], rng)
    out += _check("matmul", ag.matmul, [_leaf(n((2, 3, 4))), _leaf(n((4, 5)))], rng)
    out += _check("softmax", lambda x: ag.softmax(x, axis=-1), [_leaf(n((3, 5)))], rng)

    x = _leaf(n((2, 3, 6, 5)))
    w, bias = _leaf(n((4, 3, 3, 3))), _leaf(n(4))
    out += _check("conv2d", lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1), [x, w, bias], rng)
    out += _check("conv2d/stride2", lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1), [x, w, bias], rng)
    narrow = _leaf(n((1, 3, 3, 3)))
    out += _check("conv2d/narrow", lambda x, w: ops.conv2d(x, w, padding=1), [x, narrow], rng)
    out += _check(
        "transposed_conv2d",
        lambda x, w, b: ops.transposed_conv2d(x, w, b, stride=2),
        [_leaf(n((2, 3, 3, 2))), _leaf(n((3, 4, 2, 2))), _leaf(n(4))],
        rng,
    )
    out += _check("maxpool2d", lambda x: ops.maxpool2d(x, 2), [_leaf(n((2, 3, 4, 6)))], rng)
    out += _check(
        "layer_norm", lambda x, g, b: ops.layer_norm(x, g, b), [_leaf(n((3, 5))), _leaf(n(5)), _leaf(n(5))], rng
    )
    xb, g, be = _leaf(n((2, 3, 4, 4))), _leaf(n(3)), _leaf(n(3))

    def bn(training):
        return lambda x, g, b: ops.batch_norm2d(x, g, b, np.zeros(3), np.ones(3) * 1.5, training)

    out += _check("batch_norm2d/train", bn(True), [xb, g, be], rng)
    out += _check("batch_norm2d/eval", bn(False), [xb, g, be], rng)
    out += _check(
        "scaled_dot_attention",
        ops.scaled_dot_attention,
        [_leaf(n((2, 3, 4))), _leaf(n((2, 5, 4))), _leaf(n((2, 5, 4))), _leaf(n((3, 5)))],
        rng,
    )
    for mode in ("bilinear", "nearest"):
        out += _check(f"resize/{mode}", lambda x: ops.resize(x, (7, 3), mode), [_leaf(n((2, 5, 4)))], rng)
    return out


def vit_checks(seed: int) -> list[GradReport]:
    rng = np.random.default_rng(seed)
    layer = TransformerLayer(8, 2, 2.0, rng).astype(np.float64)
    z = _leaf(rng.standard_normal((2, 4, 8)))
    out = _check("transformer_layer", lambda t: layer(TokenGrid(t, 2, 2)).tokens, [z], rng)
    vit = VisionTransformer(VitConfig(16, 8, 8, 1, 2, 2.0), rng).astype(np.float64)
    img = _leaf(rng.random((1, 3, 16, 16)))
    out += _check("vit_forward", lambda x: vit(x).tokens, [img], rng, samples=40)
    return out


def cnn_checks(seed: int) -> list[GradReport]:
    rng = np.random.default_rng(seed)
    block = BasicBlock(3, 4, 2, rng).astype(np.float64)
    x = _leaf(rng.standard_normal((2, 3, 8, 8)))
    return _check("basic_block", block, [x], rng, samples=60)


def fusion_checks(seed: int) -> list[GradReport]:
    rng = np.random.default_rng(seed)
    rbq = RBQ(8, 2, 2, rng).astype(np.float64)
    rbq.proj.weight.data = rng.standard_normal((8, 8)) * 0.3
    rbq.rel_bias.data = rng.standard_normal(rbq.rel_bias.shape) * 0.3
    z, y = _leaf(rng.standard_normal((2, 16, 8))), _leaf(rng.standard_normal((2, 16, 8)))
    out = _check("rbq", lambda a, b: rbq(TokenGrid(a, 4, 4), TokenGrid(b, 4, 4)).tokens, [z, y], rng, samples=60)
    for stride in (4, 32):  # finer than the grid (pool + deconv) and coarser (upsample + strided conv)
        align = StageAlign(3, 8, stride, 16, rng).astype(np.float64)
        size = 64 // stride
        r = _leaf(rng.standard_normal((2, 3, size, size)))
        out += _check(
            f"align_chain/stride{stride}",
            lambda r: align.detokenize(align.tokenize(r, (4, 4))),
            [r],
            rng,
            samples=60,
        )
    return out


def loss_checks(seed: int) -> list[GradReport]:
    rng = np.random.default_rng(seed)
    mask = (rng.random((2, 8, 8)) < 0.4).astype(np.float64)
    logits = _leaf(rng.standard_normal((2, 1, 8, 8)))
    b = [_leaf(rng.standard_normal((2, 3, 4, 4))), _leaf(rng.standard_normal((2, 5, 2, 2)))]
    aux = [_leaf(rng.uniform(0.05, 0.95, (2, 8, 8))) for _ in b]
    cfg = LossConfig(k=3)

    def fn(lg, a0, a1, b0, b1):
        return total_loss(lg, [a0, a1], [b0, b1], mask, cfg).total

    return _check("total_loss", fn, [logits, *aux, *b], rng, tol=1e-4, h=1e-4)


def tiny_model_config(fusion: str = "rbq") -> ModelConfig:
    """32px network small enough for exhaustive finite differences."""
    return ModelConfig(
        vit=VitConfig(image_size=32, patch_size=8, embed_dim=8, depth=1, heads=2, mlp_ratio=2.0),
        cnn=CnnConfig(widths=(4, 4, 6, 8, 8)),
        window=2,
        decoder_width=4,
        fusion=fusion,
    )


def model_checks(seed: int, per_tensor: int = 1, h: float = 1e-6, loss_cfg: LossConfig = LossConfig(k=5)) -> list[GradReport]:
    """Full loss of a 2-image 32x32 batch w.r.t. sampled coordinates of every parameter tensor."""
    rng = np.random.default_rng(seed)
    model = DQNet(tiny_model_config(), seed=seed).astype(np.float64).train()
    for f in model.fusion.values():  # leave the zero-initialised attention path non-degenerate
        f.rbq.proj.weight.data = rng.standard_normal(f.rbq.proj.weight.shape) * 0.2
        f.rbq.rel_bias.data = rng.standard_normal(f.rbq.rel_bias.shape) * 0.2
    images = rng.random((2, 3, 32, 32))
    yy, xx = np.mgrid[0:32, 0:32]
    masks = np.stack([((yy - c[0]) ** 2 + (xx - c[1]) ** 2 < 80).astype(np.float64) for c in rng.integers(8, 24, (2, 2))])

    def loss(_):
        o = model(images)
        stages = sorted(o.aux)
        return total_loss(o.logits, [o.aux[s] for s in stages], [o.enhanced[s] for s in stages], masks, loss_cfg).total

    snapshot = {name: b.copy() for name, b in model.named_buffers()}
    reports = []
    for name, p in model.named_parameters():
        reports.append(grad_check(loss, p, h=h, tol=MODEL_TOL, op=f"model:{name}", samples=per_tensor, rng=rng))
    # train-mode forwards update running statistics; restore them so the check leaves no trace
    model.load_state_dict(snapshot, strict=False)
    return reports


SUITES: dict[str, Callable[[int], list[GradReport]]] = {
    "tensor_substrate": primitive_checks,
    "backbone_vit": vit_checks,
    "backbone_cnn": cnn_checks,
    "cross_model_fusion": fusion_checks,
    "objectives": loss_checks,
    "dqnet_model": model_checks,
}


def run(suite: str | None = None, seeds=range(1)) -> list[GradReport]:
    names = list(SUITES) if suite is None else [suite]
    for name in names:
        if name not in SUITES:
            raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return [r for name in names for seed in seeds for r in SUITES[name](seed)]
