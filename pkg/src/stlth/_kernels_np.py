"""NumPy fallback for the compiled convolution kernels.

Forward and backward use im2col / col2im with BLAS matmuls. Slower than the
compiled core (and without the skip-zero-weight shortcut) but dependency-free
and dtype-generic, which the float64 gradient-checking mode relies on.
"""

import numpy as np


def _im2col(xpad, kh, kw, stride, ho, wo):
    # (B, Ci, Hp, Wp) -> (B, Ci*kh*kw, Ho*Wo)
    b, ci = xpad.shape[0], xpad.shape[1]
    windows = np.lib.stride_tricks.sliding_window_view(xpad, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B, Ci, Ho, Wo, kh, kw)
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, ci * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def conv2d_fwd(xpad, w, bias, out, stride):
    co, ci, kh, kw = w.shape
    b, _, ho, wo = out.shape
    cols = _im2col(xpad, kh, kw, stride, ho, wo)
    res = np.matmul(w.reshape(co, ci * kh * kw), cols)  # (B, Co, Ho*Wo)
    res += bias[None, :, None]
    out[...] = res.reshape(b, co, ho, wo)


def conv2d_dx(gout, w, dxpad, stride):
    b, co, ho, wo = gout.shape
    _, ci, kh, kw = w.shape
    gflat = gout.reshape(b, co, ho * wo)
    cols = np.matmul(w.reshape(co, ci * kh * kw).T, gflat)  # (B, Ci*kh*kw, Ho*Wo)
    cols = cols.reshape(b, ci, kh, kw, ho, wo)
    # col2im: nine (k*k) strided slice-adds instead of a scatter
    for ky in range(kh):
        for kx in range(kw):
            dxpad[:, :, ky:ky + ho * stride:stride, kx:kx + wo * stride:stride] += cols[:, :, ky, kx]


def conv2d_dw(xpad, gout, dw, mask, stride):
    co, ci, kh, kw = dw.shape
    b, _, ho, wo = gout.shape
    cols = _im2col(xpad, kh, kw, stride, ho, wo)
    gflat = gout.reshape(b, co, ho * wo)
    acc = np.einsum("bon,bkn->ok", gflat, cols, optimize=True)
    acc = acc.reshape(co, ci, kh, kw)
    if mask is not None:
        acc = np.where(mask.astype(bool), acc, acc.dtype.type(0))
    dw[...] = acc
