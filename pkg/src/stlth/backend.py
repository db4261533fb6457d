"""Kernel backend selection.

The compiled extension is preferred when importable; set STLTH_BACKEND to
"numpy" or "compiled" to force one. float64 work is always routed to the
NumPy kernels (the extension is float32-only).
"""

import os

import numpy as np

from . import _kernels_np

try:
    from . import _core as _compiled
except ImportError:  # extension not built
    _compiled = None

_requested = os.environ.get("STLTH_BACKEND", "auto")
if _requested not in ("auto", "compiled", "numpy"):
    raise RuntimeError(f"STLTH_BACKEND must be auto|compiled|numpy, got {_requested!r}")
if _requested == "compiled" and _compiled is None:
    raise RuntimeError("STLTH_BACKEND=compiled but the stlth._core extension is not built")

_use_compiled = _compiled is not None and _requested != "numpy"


def backend_name():
    return "compiled" if _use_compiled else "numpy"


def conv2d_fwd(xpad, w, bias, out, stride):
    if _use_compiled and out.dtype == np.float32 and stride == 1:
        _compiled.conv2d_fwd(xpad, w, bias, out, stride)
    else:
        _kernels_np.conv2d_fwd(xpad, w, bias, out, stride)


def conv2d_dx(gout, w, dxpad, stride):
    """Gradient w.r.t. the padded input. dxpad must arrive zero-filled."""
    if _use_compiled and gout.dtype == np.float32 and stride == 1:
        _compiled.conv2d_dx(gout, w, dxpad, stride)
    else:
        _kernels_np.conv2d_dx(gout, w, dxpad, stride)


def conv2d_dw(xpad, gout, dw, mask, stride):
    if _use_compiled and gout.dtype == np.float32 and stride == 1:
        if mask is None:
            mask = np.ones(dw.shape, dtype=np.uint8)
        _compiled.conv2d_dw(xpad, gout, dw, mask, stride)
    else:
        _kernels_np.conv2d_dw(xpad, gout, dw, mask, stride)
