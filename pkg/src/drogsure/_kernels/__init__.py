"""Kernel backend selection.

The compiled extension is preferred when present; the NumPy fallback is
numerically equivalent (same layouts, same float64 contracts).  Set
DROGSURE_PURE_PYTHON=1 to force the fallback.
"""

import os

from . import _convpy

if os.environ.get("DROGSURE_PURE_PYTHON"):
    _impl = _convpy
else:
    try:
        from . import _convfast as _impl
    except ImportError:
        _impl = _convpy

BACKEND = _impl.BACKEND_NAME
conv2d_forward = _impl.conv2d_forward
conv2d_input_grad = _impl.conv2d_input_grad
conv2d_kernel_grad = _impl.conv2d_kernel_grad
