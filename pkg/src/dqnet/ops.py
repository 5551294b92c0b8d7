"""Differentiable network primitives built on :mod:`dqnet.autograd`.

Spatial operations take ``[N, C, H, W]`` arrays; a ``[C, H, W]`` input is
treated as a batch of one and returned without the batch axis.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .autograd import Tensor, as_tensor, make_node, matmul, softmax
from .errors import DegenerateBatchError, DimensionError

NORM_EPS = 1e-5


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected a [C,H,W] or [N,C,H,W] tensor, got shape {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return y.reshape(y.shape[1:]) if squeeze else y


def _window(a: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return a[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


def _conv2d_narrow(x: Tensor, weight: Tensor, bias: Tensor | None, padding: int) -> Tensor:
    """Stride-1 convolution for ``C_out <= C_in``: stack every offset's kernel into one GEMM.

    The forward pass computes ``(k*k*C_out, C_in) @ (C_in, N*H*W)`` once and
    shift-adds the ``k*k`` output planes; the backward pass shifts the
    (narrower) output gradient instead of the input.
    """
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    p, q = padding, k - 1 - padding
    ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
    m = n * h * w
    xc = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(c, m)
    w_all = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1)).reshape(k * k * o, c)
    planes = (w_all @ xc).reshape(k * k * o, n, h, w)
    planes = np.pad(planes, ((0, 0), (0, 0), (p, p), (p, p))).reshape(k, k, o, n, h + 2 * p, w + 2 * p)
    out = np.zeros((o, n, ho, wo), dtype=planes.dtype)
    for i in range(k):
        for j in range(k):
            out += planes[i, j, :, :, i : i + ho, j : j + wo]
    out = out.transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)

    def backward(g):
        gp = np.pad(g.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (q, q), (q, q)))
        stack = np.empty((k, k, o, n, h, w), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                stack[i, j] = gp[:, :, k - 1 - i : k - 1 - i + h, k - 1 - j : k - 1 - j + w]
        stack = stack.reshape(k * k * o, m)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (w_all.T @ stack).reshape(c, n, h, w).transpose(1, 0, 2, 3)
        if weight.requires_grad:
            gw = (stack @ xc.T).reshape(k, k, o, c).transpose(2, 3, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv2d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with a ``[C_out, C_in, k, k]`` kernel.

    Each kernel offset contributes one ``(C_out, C_in) @ (C_in, N H'W')`` product,
    which keeps memory at the size of the input instead of an im2col buffer.
    """
    x, squeeze = _batched(as_tensor(x))
    n, c, h, w = x.shape
    o, c_w, k, k2 = weight.shape
    if c_w != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {c_w}")
    if k != k2:
        raise DimensionError("conv2d: only square kernels are supported")
    if padding < 0 or stride < 1:
        raise DimensionError("conv2d: padding must be >= 0 and stride >= 1")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {h}x{w}")

    if stride == 1 and o <= c and padding <= k - 1:
        return _unbatch(_conv2d_narrow(x, weight, bias, padding), squeeze)
    # channel-major layout so every offset is one contiguous (C_out, C_in) @ (C_in, N*H'W') GEMM
    xc = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3))
    xp = np.pad(xc, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xc
    wk = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))
    m = n * ho * wo
    out = np.zeros((o, m), dtype=np.result_type(x.dtype, weight.dtype))
    for i in range(k):
        for j in range(k):
            out += wk[i, j] @ _window(xp, i, j, stride, ho, wo).reshape(c, m)
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, m)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
        if weight.requires_grad:
            gwk = np.empty_like(wk)
        for i in range(k):
            for j in range(k):
                if weight.requires_grad:
                    gwk[i, j] = g2 @ _window(xp, i, j, stride, ho, wo).reshape(c, m).T
                if x.requires_grad:
                    _window(gxp, i, j, stride, ho, wo)[...] += (wk[i, j].T @ g2).reshape(c, n, ho, wo)
        if x.requires_grad:
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            gx = gx.transpose(1, 0, 2, 3)
        if weight.requires_grad:
            gw = gwk.transpose(2, 3, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _unbatch(make_node(out, parents, backward, "conv2d"), squeeze)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Non-overlapping transposed convolution, kernel size equal to ``stride``.

    ``weight`` is ``[C_in, C_out, s, s]``; every input pixel is replaced by an
    ``s x s`` block, so the output is exactly ``stride`` times larger. This is
    the adjoint of ``conv2d(., weight, stride=s)``.
    """
    x, squeeze = _batched(as_tensor(x))
    n, c, h, w = x.shape
    c_w, o, k, k2 = weight.shape
    if c_w != c:
        raise DimensionError(f"transposed_conv2d: input has {c} channels, kernel expects {c_w}")
    if not (k == k2 == stride):
        raise DimensionError("transposed_conv2d: kernel size must equal stride")
    s = stride
    xm = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    wm = weight.data.reshape(c, o * s * s)
    out = (xm @ wm).reshape(n, h, w, o, s, s).transpose(0, 3, 1, 4, 2, 5).reshape(n, o, h * s, w * s)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)

    def backward(g):
        gm = g.reshape(n, o, h, s, w, s).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * w, o * s * s)
        gx = (gm @ wm.T).reshape(n, h, w, c).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xm.T @ gm).reshape(c, o, s, s) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _unbatch(make_node(out, parents, backward, "transposed_conv2d"), squeeze)


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Max over ``k x k`` windows. Ties route the gradient to the first maximum in row-major order."""
    stride = k if stride is None else stride
    x, squeeze = _batched(as_tensor(x))
    n, c, h, w = x.shape
    if k > h or k > w:
        raise DimensionError(f"maxpool2d: window {k} larger than input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        for a in range(k):
            for b in range(k):
                hit = arg == a * k + b
                if hit.any():
                    _window(gx, a, b, stride, ho, wo)[...] += g * hit
        return (gx,)

    return _unbatch(make_node(out, (x,), backward, "maxpool2d"), squeeze)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    x = as_tensor(x)
    if x.shape[-1] == 0:
        raise DimensionError("layer_norm: empty normalized axis")
    if (gamma is None) != (beta is None):
        raise ValueError("layer_norm: pass both gamma and beta, or neither")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv
    out = xhat if gamma is None else xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g if gamma is None else g * gamma.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gamma is None:
            return (gx,)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    parents = (x,) if gamma is None else (x, gamma, beta)
    return make_node(out, parents, backward, "layer_norm")


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = NORM_EPS,
) -> Tensor:
    """Per-channel normalization of an ``[N, C, H, W]`` batch.

    In training mode the batch statistics are used and the running buffers are
    updated in place with the (biased) batch mean and variance; in eval mode
    the running buffers are used.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"batch_norm2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    axes = (0, 2, 3)
    if training:
        count = n * h * w
        if count == 1:
            raise DegenerateBatchError("batch_norm2d: one value per channel in training mode")
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c)
    else:
        mu = running_mean.reshape(1, c, 1, 1).astype(x.dtype)
        xc = x.data - mu
        var = running_var.reshape(1, c, 1, 1).astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        dxhat = g * gd
        if training:
            gx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True) - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = dxhat * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_node(out, (x, gamma, beta), backward, "batch_norm2d")


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    bias: Tensor | None = None,
    probe: dict | None = None,
) -> Tensor:
    """``softmax(Q K^T / sqrt(d) + bias) V`` over the last two axes.

    Leading axes are batch axes and broadcast. When ``probe`` is a dict, the
    number of attention-score elements and their byte size are written to it.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if k.shape[-2] == 0:
        raise DimensionError("scaled_dot_attention: no keys")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"scaled_dot_attention: incompatible shapes {q.shape}, {k.shape}, {v.shape}")
    d = q.shape[-1]
    scores = matmul(q, k.transpose(tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * (1.0 / math.sqrt(d))
    if bias is not None:
        scores = scores + bias
    if probe is not None:
        probe["score_elements"] = int(scores.size)
        probe["score_bytes"] = int(scores.data.nbytes)
    return matmul(softmax(scores, axis=-1), v)


# -- resampling ---------------------------------------------------------------
def _cubic(t: np.ndarray, a: float = -0.75) -> np.ndarray:
    t = np.abs(t)
    near = ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    far = ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


@lru_cache(maxsize=256)
def interpolation_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    """``(n_out, n_in)`` matrix resampling one axis with half-pixel centres."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    scale = n_in / n_out
    if mode == "nearest":
        src = np.minimum(np.floor(rows * scale).astype(int), n_in - 1)
        m[rows, src] = 1.0
        return m
    centre = (rows + 0.5) * scale - 0.5
    if mode == "bilinear":
        centre = np.maximum(centre, 0.0)
        i0 = np.minimum(np.floor(centre).astype(int), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        lam = centre - i0
        np.add.at(m, (rows, i0), 1.0 - lam)
        np.add.at(m, (rows, i1), lam)
        return m
    if mode == "bicubic":
        base = np.floor(centre).astype(int)
        frac = centre - base
        for off in (-1, 0, 1, 2):
            idx = np.clip(base + off, 0, n_in - 1)
            np.add.at(m, (rows, idx), _cubic(frac - off))
        return m
    raise ValueError(f"unknown interpolation mode {mode!r}")


def resize(x: Tensor, size: tuple[int, int], mode: str = "bilinear") -> Tensor:
    """Separable resampling of the last two axes to ``size``."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    ho, wo = size
    if ho < 1 or wo < 1:
        raise DimensionError("resize: target size must be positive")
    if (ho, wo) == (h, w):
        return x
    mh = interpolation_matrix(h, ho, mode).astype(x.dtype)
    mw = interpolation_matrix(w, wo, mode).astype(x.dtype)
    out = mh @ x.data @ mw.T

    def backward(g):
        return (mh.T @ g @ mw,)

    return make_node(out, (x,), backward, "resize")
