# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution kernels with exact-zero weight skipping.

Thin wrappers around the C kernels in ``_conv_kernels.h``.  Weights that
are exactly 0.0 are skipped, so pruned networks run proportionally
faster with bit-identical results; accumulation order is fixed, so runs
are reproducible.  Only stride-1 convolutions are compiled — callers
pad inputs beforehand.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef extern from "_conv_kernels.h":
    void stlth_conv_fwd(const float* xpad, const float* w, const float* bias,
                        float* out, ptrdiff_t B, ptrdiff_t Ci, ptrdiff_t Hp,
                        ptrdiff_t Wp, ptrdiff_t Co, ptrdiff_t KH,
                        ptrdiff_t KW, ptrdiff_t Ho, ptrdiff_t Wo) nogil
    void stlth_conv_dx(const float* gpad, const float* w, float* dxpad,
                       ptrdiff_t B, ptrdiff_t Co, ptrdiff_t Hgp,
                       ptrdiff_t Wgp, ptrdiff_t Ci, ptrdiff_t KH,
                       ptrdiff_t KW, ptrdiff_t Hx, ptrdiff_t Wx) nogil
    void stlth_conv_dw(const float* xpad, const float* gout, float* dw,
                       const unsigned char* mask, ptrdiff_t B, ptrdiff_t Ci,
                       ptrdiff_t Hp, ptrdiff_t Wp, ptrdiff_t Co,
                       ptrdiff_t KH, ptrdiff_t KW, ptrdiff_t Ho,
                       ptrdiff_t Wo) nogil


def conv2d_fwd(const float[:, :, :, ::1] xpad,
               const float[:, :, :, ::1] w,
               const float[::1] bias,
               float[:, :, :, ::1] out,
               int stride):
    """Valid convolution of a pre-padded input; ``out`` is overwritten."""
    if stride != 1:
        raise ValueError("compiled kernels support stride 1 only")
    with nogil:
        stlth_conv_fwd(&xpad[0, 0, 0, 0], &w[0, 0, 0, 0], &bias[0],
                       &out[0, 0, 0, 0],
                       xpad.shape[0], xpad.shape[1], xpad.shape[2],
                       xpad.shape[3], w.shape[0], w.shape[2], w.shape[3],
                       out.shape[2], out.shape[3])


def conv2d_dx(const float[:, :, :, ::1] gout,
              const float[:, :, :, ::1] w,
              float[:, :, :, ::1] dxpad,
              int stride):
    """Gradient w.r.t. the padded input; ``dxpad`` is overwritten.

    Computed as a forward convolution of the re-padded output gradient
    with the channel-transposed, spatially flipped weights (the flip is
    index arithmetic inside the kernel), which reuses the register-blocked
    streaming kernels and their zero skipping.
    """
    if stride != 1:
        raise ValueError("compiled kernels support stride 1 only")
    cdef Py_ssize_t B = gout.shape[0], Co = gout.shape[1]
    cdef Py_ssize_t Ho = gout.shape[2], Wo = gout.shape[3]
    cdef Py_ssize_t Ci = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    gpad_arr = np.zeros((B, Co, Ho + 2 * (KH - 1), Wo + 2 * (KW - 1)),
                        np.float32)
    gpad_arr[:, :, KH - 1:KH - 1 + Ho, KW - 1:KW - 1 + Wo] = gout
    cdef const float[:, :, :, ::1] gpad = gpad_arr
    with nogil:
        stlth_conv_dx(&gpad[0, 0, 0, 0], &w[0, 0, 0, 0], &dxpad[0, 0, 0, 0],
                      B, Co, gpad.shape[2], gpad.shape[3], Ci, KH, KW,
                      dxpad.shape[2], dxpad.shape[3])


def conv2d_dw(const float[:, :, :, ::1] xpad,
              const float[:, :, :, ::1] gout,
              float[:, :, :, ::1] dw,
              const unsigned char[:, :, :, ::1] mask,
              int stride):
    """Weight gradient; masked-out positions are skipped and written as 0."""
    if stride != 1:
        raise ValueError("compiled kernels support stride 1 only")
    with nogil:
        stlth_conv_dw(&xpad[0, 0, 0, 0], &gout[0, 0, 0, 0], &dw[0, 0, 0, 0],
                      &mask[0, 0, 0, 0],
                      xpad.shape[0], xpad.shape[1], xpad.shape[2],
                      xpad.shape[3], gout.shape[1], dw.shape[2], dw.shape[3],
                      gout.shape[2], gout.shape[3])
