"""Differentiable image and attention operations.

Everything here runs eagerly on NumPy buffers (convolutions through the
selected kernel backend) and records its backward closure on the active
ComputationTape via :func:`stlth.tensor.finish_op`. Shapes follow the
(batch, channel, height, width) layout throughout; there is no implicit
broadcasting — the only cross-shape pattern provided is the per-channel
scale/shift used by the normalization-based transforms.
"""

import numpy as np

from . import backend
from .tensor import Tensor, finish_op, finish_op2

_PAD_MODES = ("reflect", "zero")


def _as_4d(op, t, what):
    if t.ndim != 4:
        raise ValueError(f"{op}: {what} must be 4-d (B,C,H,W), got {t.ndim}-d {tuple(t.shape)}")


def _reflect_fold(dxpad, h, w, ph, pw):
    """Collapse the gradient of a reflect-padded buffer onto the unpadded input.

    Reflect padding reads interior pixels into the border, so the border
    gradients fold back onto the rows/columns they were read from.
    """
    tmp = dxpad[:, :, ph:ph + h, :].copy()
    for j in range(ph):
        tmp[:, :, ph - j, :] += dxpad[:, :, j, :]
        tmp[:, :, h - 2 - j, :] += dxpad[:, :, h + ph + j, :]
    dx = tmp[:, :, :, pw:pw + w].copy()
    for j in range(pw):
        dx[:, :, :, pw - j] += tmp[:, :, :, j]
        dx[:, :, :, w - 2 - j] += tmp[:, :, :, w + pw + j]
    return dx


def conv2d(x, weight, bias=None, stride=1, padding="reflect", weight_mask=None):
    """Same-padded 2-d cross-correlation.

    ``padding`` selects the border fill ("reflect" or "zero"); the pad amount
    is (k-1)//2 per side so stride-1 odd kernels preserve spatial size.
    ``weight_mask`` (optional uint8 array shaped like ``weight``) zeroes the
    corresponding weight-gradient entries exactly, which keeps pruned weights
    frozen at zero during training.
    """
    _as_4d("conv2d", x, "input")
    _as_4d("conv2d", weight, "weight")
    b, ci, h, w = x.shape
    co, wci, kh, kw = weight.shape
    if ci != wci:
        raise ValueError(f"conv2d: input channel dimension is {ci} but weight expects {wci}")
    if x.dtype != weight.dtype:
        raise ValueError(f"conv2d: input dtype {x.dtype} != weight dtype {weight.dtype}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"conv2d: bias shape {tuple(bias.shape)} != output channel dimension ({co},)")
    if not (isinstance(stride, (int, np.integer)) and stride >= 1):
        raise ValueError(f"conv2d: stride must be a positive integer, got {stride!r}")
    if padding not in _PAD_MODES:
        raise ValueError(f"conv2d: padding must be one of {_PAD_MODES}, got {padding!r}")

    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    if h + 2 * ph < kh:
        raise ValueError(f"conv2d: padded input height {h + 2 * ph} is smaller than kernel height {kh}")
    if w + 2 * pw < kw:
        raise ValueError(f"conv2d: padded input width {w + 2 * pw} is smaller than kernel width {kw}")
    if padding == "reflect" and (ph > h - 1 or pw > w - 1):
        raise ValueError(f"conv2d: reflect padding of {max(ph, pw)} needs input height/width "
                         f"above it, got {h}x{w}")

    if ph == 0 and pw == 0:
        xpad = x.data
    elif padding == "reflect":
        xpad = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode="reflect")
    else:
        xpad = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))

    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    out = np.empty((b, co, ho, wo), dtype=x.dtype)
    wdata = weight.data
    bias_arr = bias.data if bias is not None else np.zeros(co, dtype=x.dtype)
    backend.conv2d_fwd(xpad, wdata, bias_arr, out, stride)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    need_x, need_w = x.requires_grad, weight.requires_grad
    need_b = bias is not None and bias.requires_grad

    def backward(g):
        g = np.ascontiguousarray(g)
        dx = dw = db = None
        if need_b:
            db = g.sum(axis=(0, 2, 3))
        if need_w:
            dw = np.empty_like(wdata)
            backend.conv2d_dw(xpad, g, dw, weight_mask, stride)
        if need_x:
            dxpad = np.zeros_like(xpad) if (ph or pw) else np.zeros((b, ci, h, w), dtype=g.dtype)
            backend.conv2d_dx(g, wdata, dxpad, stride)
            if ph == 0 and pw == 0:
                dx = dxpad
            elif padding == "reflect":
                dx = _reflect_fold(dxpad, h, w, ph, pw)
            else:
                dx = dxpad[:, :, ph:ph + h, pw:pw + w]
        return (dx, dw) if bias is None else (dx, dw, db)

    return finish_op("conv2d", out, inputs, backward)


def relu(x):
    d = x.data

    def backward(g):
        return (g * (d > 0),)

    return finish_op("relu", np.maximum(d, 0), (x,), backward)


def sigmoid(x):
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)

    def backward(g):
        return (g * y * (1.0 - y),)

    return finish_op("sigmoid", y, (x,), backward)


def upsample_nearest(x, factor):
    _as_4d("upsample_nearest", x, "input")
    if not (isinstance(factor, (int, np.integer)) and factor >= 1):
        raise ValueError(f"upsample_nearest: factor must be a positive integer, got {factor!r}")
    f = int(factor)
    b, c, h, w = x.shape
    out = x.data.repeat(f, axis=2).repeat(f, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, f, w, f).sum(axis=(3, 5)),)

    return finish_op("upsample_nearest", out, (x,), backward)


def avg_pool2x2(x):
    _as_4d("avg_pool2x2", x, "input")
    b, c, h, w = x.shape
    if h % 2:
        raise ValueError(f"avg_pool2x2: input height {h} is not divisible by 2")
    if w % 2:
        raise ValueError(f"avg_pool2x2: input width {w} is not divisible by 2")
    d = x.data
    out = d.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5), dtype=d.dtype)
    quarter = d.dtype.type(0.25)

    def backward(g):
        return ((g * quarter).repeat(2, axis=2).repeat(2, axis=3),)

    return finish_op("avg_pool2x2", out, (x,), backward)


def channel_stats(x, epsilon=1e-5):
    """Per-(batch, channel) spatial mean and standard deviation.

    The variance is the population variance over the H*W positions and the
    returned deviation is sqrt(variance + epsilon), so constant channels map
    to sqrt(epsilon) rather than zero.
    """
    _as_4d("channel_stats", x, "input")
    d = x.data
    b, c, h, w = d.shape
    mu = d.mean(axis=(2, 3), dtype=d.dtype)
    xc = d - mu[:, :, None, None]
    var = (xc * xc).mean(axis=(2, 3), dtype=d.dtype)
    std = np.sqrt(var + d.dtype.type(epsilon))
    inv_m = d.dtype.type(1.0 / (h * w))

    def backward(gm, gs):
        grad = None
        if gm is not None:
            grad = np.broadcast_to((gm * inv_m)[:, :, None, None], d.shape)
        if gs is not None:
            term = (gs * inv_m / std)[:, :, None, None] * xc
            grad = term if grad is None else grad + term
        return (grad,)

    return finish_op2("channel_stats", mu, std, (x,), backward)


def normalize_channels(x, epsilon=1e-5):
    """Subtract the per-channel spatial mean and divide by the deviation."""
    _as_4d("normalize_channels", x, "input")
    d = x.data
    mu = d.mean(axis=(2, 3), keepdims=True, dtype=d.dtype)
    xc = d - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True, dtype=d.dtype)
    std = np.sqrt(var + d.dtype.type(epsilon))
    y = xc / std

    def backward(g):
        g_mean = g.mean(axis=(2, 3), keepdims=True, dtype=g.dtype)
        gy_mean = (g * y).mean(axis=(2, 3), keepdims=True, dtype=g.dtype)
        return ((g - g_mean - y * gy_mean) / std,)

    return finish_op("normalize_channels", y, (x,), backward)


def scale_shift_channels(x, scale, shift):
    """Per-channel affine map: x * scale + shift with (B,C)-shaped factors."""
    _as_4d("scale_shift_channels", x, "input")
    b, c = x.shape[:2]
    if scale.shape != (b, c):
        raise ValueError(f"scale_shift_channels: scale shape {tuple(scale.shape)} != ({b}, {c})")
    if shift.shape != (b, c):
        raise ValueError(f"scale_shift_channels: shift shape {tuple(shift.shape)} != ({b}, {c})")
    d, sc, sh = x.data, scale.data, shift.data
    out = d * sc[:, :, None, None] + sh[:, :, None, None]
    need_x, need_sc, need_sh = x.requires_grad, scale.requires_grad, shift.requires_grad

    def backward(g):
        dx = g * sc[:, :, None, None] if need_x else None
        dscale = (g * d).sum(axis=(2, 3)) if need_sc else None
        dshift = g.sum(axis=(2, 3)) if need_sh else None
        return dx, dscale, dshift

    return finish_op("scale_shift_channels", out, (x, scale, shift), backward)


def softmax_over_positions(x):
    """Row-stochastic softmax along the last axis of a (B,N,M) tensor."""
    if x.ndim != 3:
        raise ValueError(f"softmax_over_positions: input must be 3-d (B,N,M), got {x.ndim}-d")
    d = x.data
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True, dtype=d.dtype)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True, dtype=g.dtype)),)

    return finish_op("softmax_over_positions", y, (x,), backward)


def bmm(a, b):
    """Batched matrix product: (B,N,K) @ (B,K,M) -> (B,N,M)."""
    if a.ndim != 3 or b.ndim != 3:
        raise ValueError(f"bmm: inputs must be 3-d, got {a.ndim}-d and {b.ndim}-d")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"bmm: batch dimensions differ, {a.shape[0]} vs {b.shape[0]}")
    if a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm: inner dimensions differ, {a.shape[2]} vs {b.shape[1]}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        da = g @ bd.swapaxes(1, 2) if need_a else None
        db = ad.swapaxes(1, 2) @ g if need_b else None
        return da, db

    return finish_op("bmm", ad @ bd, (a, b), backward)


def transpose_last2(x):
    """Swap the last two axes (materialized, keeps buffers contiguous)."""
    out = np.ascontiguousarray(x.data.swapaxes(-1, -2))

    def backward(g):
        return (np.ascontiguousarray(g.swapaxes(-1, -2)),)

    return finish_op("transpose_last2", out, (x,), backward)


def l2norm_rows(x):
    """Euclidean norm of each leading-axis row: (B, ...) -> (B,).

    The forward value is the exact sqrt of the sum of squares (zero rows give
    exactly zero); the backward pass uses a zero subgradient at zero rows.
    """
    if x.ndim < 1:
        raise ValueError("l2norm_rows: input must have at least one axis")
    d = x.data
    flat = d.reshape(d.shape[0], -1)
    n = np.sqrt((flat * flat).sum(axis=1, dtype=d.dtype))

    def backward(g):
        denom = np.maximum(n, d.dtype.type(1e-12))
        return (((g / denom)[:, None] * flat).reshape(d.shape),)

    return finish_op("l2norm_rows", n, (x,), backward)
