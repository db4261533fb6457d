"""Convolution kernel backends: loop oracles and compiled/NumPy agreement.

The compiled extension carries width-specialized register-blocked paths and a
zero-weight skip, so it is exercised across the specialized output widths
(8/16/32/64 and the +2 gradient widths) as well as generic odd sizes, against
both a straight-loop oracle and the NumPy im2col implementation.
"""

import numpy as np
import pytest

from stlth import _kernels_np, backend

try:
    from stlth import _core as compiled
except ImportError:
    compiled = None

needs_compiled = pytest.mark.skipif(compiled is None,
                                    reason="compiled extension not built")


def _loop_fwd(xpad, w, bias, ho, wo, stride=1):
    b, ci = xpad.shape[0], xpad.shape[1]
    co, _, kh, kw = w.shape
    out = np.zeros((b, co, ho, wo), dtype=np.float64)
    for n in range(b):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = float(bias[o])
                    for c in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                acc += float(xpad[n, c, i * stride + u, j * stride + v]) \
                                    * float(w[o, c, u, v])
                    out[n, o, i, j] = acc
    return out


def _loop_dx(gout, w, hp, wp, stride=1):
    b, co, ho, wo = gout.shape
    _, ci, kh, kw = w.shape
    dx = np.zeros((b, ci, hp, wp), dtype=np.float64)
    for n in range(b):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    g = float(gout[n, o, i, j])
                    for c in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                dx[n, c, i * stride + u, j * stride + v] += g * float(w[o, c, u, v])
    return dx


def _loop_dw(xpad, gout, shape, stride=1):
    co, ci, kh, kw = shape
    b, _, ho, wo = gout.shape
    dw = np.zeros(shape, dtype=np.float64)
    for o in range(co):
        for c in range(ci):
            for u in range(kh):
                for v in range(kw):
                    acc = 0.0
                    for n in range(b):
                        for i in range(ho):
                            for j in range(wo):
                                acc += float(gout[n, o, i, j]) \
                                    * float(xpad[n, c, i * stride + u, j * stride + v])
                    dw[o, c, u, v] = acc
    return dw


def _case(seed, b, ci, co, h, w, k=3, dtype=np.float32):
    rng = np.random.Generator(np.random.PCG64(seed))
    hp, wp = h + k - 1, w + k - 1
    xpad = rng.normal(size=(b, ci, hp, wp)).astype(dtype)
    wgt = rng.normal(0, 0.5, size=(co, ci, k, k)).astype(dtype)
    bias = rng.normal(size=co).astype(dtype)
    gout = rng.normal(size=(b, co, h, w)).astype(dtype)
    return xpad, wgt, bias, gout


def _assert_f32_close(got, ref):
    """Backends may sum in different orders; the bound scales with magnitude."""
    atol = 1e-5 * max(1.0, float(np.abs(ref).max()))
    np.testing.assert_allclose(got, ref, rtol=1e-4, atol=atol)


@pytest.mark.parametrize("h,w", [(4, 5), (6, 8), (3, 16)])
def test_numpy_kernels_match_loop_oracle(h, w):
    xpad, wgt, bias, gout = _case(50 + h + w, 2, 3, 4, h, w, dtype=np.float64)
    out = np.empty((2, 4, h, w), dtype=np.float64)
    _kernels_np.conv2d_fwd(xpad, wgt, bias, out, 1)
    np.testing.assert_allclose(out, _loop_fwd(xpad, wgt, bias, h, w), rtol=1e-10)

    dxpad = np.zeros_like(xpad)
    _kernels_np.conv2d_dx(gout, wgt, dxpad, 1)
    np.testing.assert_allclose(dxpad, _loop_dx(gout, wgt, *xpad.shape[2:]),
                               rtol=1e-10)

    dw = np.empty_like(wgt)
    _kernels_np.conv2d_dw(xpad, gout, dw, None, 1)
    np.testing.assert_allclose(dw, _loop_dw(xpad, gout, wgt.shape), rtol=1e-10)


def test_numpy_kernels_stride2_match_loop_oracle():
    rng = np.random.Generator(np.random.PCG64(60))
    xpad = rng.normal(size=(1, 2, 9, 9))
    wgt = rng.normal(size=(3, 2, 3, 3))
    bias = rng.normal(size=3)
    ho = wo = (9 - 3) // 2 + 1
    out = np.empty((1, 3, ho, wo))
    _kernels_np.conv2d_fwd(xpad, wgt, bias, out, 2)
    np.testing.assert_allclose(out, _loop_fwd(xpad, wgt, bias, ho, wo, 2),
                               rtol=1e-10)
    gout = rng.normal(size=out.shape)
    dxpad = np.zeros_like(xpad)
    _kernels_np.conv2d_dx(gout, wgt, dxpad, 2)
    np.testing.assert_allclose(dxpad, _loop_dx(gout, wgt, 9, 9, 2), rtol=1e-10)
    dw = np.empty_like(wgt)
    _kernels_np.conv2d_dw(xpad, gout, dw, None, 2)
    np.testing.assert_allclose(dw, _loop_dw(xpad, gout, wgt.shape, 2), rtol=1e-10)


# Output widths covering every register-blocked specialization plus generic
# fallbacks (odd widths, tiny sizes) and the dx gradient widths (w + 2).
_WIDTH_CASES = [
    (1, 3, 16, 8, 8), (2, 16, 16, 16, 16), (1, 8, 4, 4, 32),
    (1, 4, 8, 8, 64), (2, 3, 5, 6, 7), (1, 2, 3, 2, 2), (1, 5, 7, 5, 34),
    (3, 2, 2, 4, 10), (1, 6, 6, 6, 18), (1, 3, 3, 3, 66),
]


@needs_compiled
@pytest.mark.parametrize("b,ci,co,h,w", _WIDTH_CASES)
def test_compiled_matches_numpy_forward_and_backward(b, ci, co, h, w):
    xpad, wgt, bias, gout = _case(b * 1000 + w, b, ci, co, h, w)

    out_c = np.empty((b, co, h, w), dtype=np.float32)
    out_n = np.empty_like(out_c)
    compiled.conv2d_fwd(xpad, wgt, bias, out_c, 1)
    _kernels_np.conv2d_fwd(xpad, wgt, bias, out_n, 1)
    _assert_f32_close(out_c, out_n)

    dx_c = np.zeros_like(xpad)
    dx_n = np.zeros_like(xpad)
    compiled.conv2d_dx(gout, wgt, dx_c, 1)
    _kernels_np.conv2d_dx(gout, wgt, dx_n, 1)
    _assert_f32_close(dx_c, dx_n)

    ones = np.ones(wgt.shape, dtype=np.uint8)
    dw_c = np.empty_like(wgt)
    dw_n = np.empty_like(wgt)
    compiled.conv2d_dw(xpad, gout, dw_c, ones, 1)
    _kernels_np.conv2d_dw(xpad, gout, dw_n, ones, 1)
    _assert_f32_close(dw_c, dw_n)


@needs_compiled
def test_compiled_1x1_kernels_match_numpy():
    rng = np.random.Generator(np.random.PCG64(70))
    x = rng.normal(size=(2, 8, 6, 16)).astype(np.float32)
    wgt = rng.normal(size=(4, 8, 1, 1)).astype(np.float32)
    bias = rng.normal(size=4).astype(np.float32)
    out_c = np.empty((2, 4, 6, 16), dtype=np.float32)
    out_n = np.empty_like(out_c)
    compiled.conv2d_fwd(x, wgt, bias, out_c, 1)
    _kernels_np.conv2d_fwd(x, wgt, bias, out_n, 1)
    _assert_f32_close(out_c, out_n)


@needs_compiled
def test_compiled_skips_zero_weights_exactly():
    """Sparse weights: compiled fast path must equal the dense computation."""
    xpad, wgt, bias, gout = _case(80, 2, 8, 8, 8, 16)
    mask = (np.random.Generator(np.random.PCG64(81))
            .uniform(size=wgt.shape) > 0.9).astype(np.uint8)
    wgt *= mask  # mostly zeros: exercises the nonzero-compaction path

    out_c = np.empty((2, 8, 8, 16), dtype=np.float32)
    out_n = np.empty_like(out_c)
    compiled.conv2d_fwd(xpad, wgt, bias, out_c, 1)
    _kernels_np.conv2d_fwd(xpad, wgt, bias, out_n, 1)
    np.testing.assert_allclose(out_c, out_n, rtol=1e-5, atol=1e-6)

    dx_c = np.zeros_like(xpad)
    dx_n = np.zeros_like(xpad)
    compiled.conv2d_dx(gout, wgt, dx_c, 1)
    _kernels_np.conv2d_dx(gout, wgt, dx_n, 1)
    np.testing.assert_allclose(dx_c, dx_n, rtol=1e-5, atol=1e-6)


@needs_compiled
def test_compiled_dw_zeroes_masked_entries():
    xpad, wgt, bias, gout = _case(90, 1, 4, 4, 8, 8)
    mask = (np.random.Generator(np.random.PCG64(91))
            .uniform(size=wgt.shape) > 0.5).astype(np.uint8)
    dw = np.empty_like(wgt)
    compiled.conv2d_dw(xpad, gout, dw, mask, 1)
    np.testing.assert_array_equal(dw[mask == 0], 0.0)
    dw_ref = np.empty_like(wgt)
    _kernels_np.conv2d_dw(xpad, gout, dw_ref, mask, 1)
    _assert_f32_close(dw, dw_ref)


@needs_compiled
def test_compiled_is_deterministic_across_repeats():
    xpad, wgt, bias, gout = _case(95, 2, 6, 6, 8, 16)
    first = np.empty((2, 6, 8, 16), dtype=np.float32)
    compiled.conv2d_fwd(xpad, wgt, bias, first, 1)
    for _ in range(3):
        again = np.empty_like(first)
        compiled.conv2d_fwd(xpad, wgt, bias, again, 1)
        np.testing.assert_array_equal(first, again)


def test_backend_dispatch_routes_float64_to_numpy():
    """float64 always takes the NumPy path regardless of build: results must
    match the loop oracle bit-for-bit with the im2col implementation."""
    xpad, wgt, bias, _ = _case(96, 1, 2, 3, 4, 5, dtype=np.float64)
    via_backend = np.empty((1, 3, 4, 5), dtype=np.float64)
    direct = np.empty_like(via_backend)
    backend.conv2d_fwd(xpad, wgt, bias, via_backend, 1)
    _kernels_np.conv2d_fwd(xpad, wgt, bias, direct, 1)
    np.testing.assert_array_equal(via_backend, direct)


def test_backend_name_is_declared():
    assert backend.backend_name() in ("compiled", "numpy")
