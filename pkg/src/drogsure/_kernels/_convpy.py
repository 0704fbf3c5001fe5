"""NumPy fallback for the convolution kernels.

Same contracts as the compiled module: float64, channels-last layout,
cross-correlation convention, explicit symmetric padding.  The k*k offset
loop keeps every inner contraction a single BLAS call.
"""

import numpy as np

BACKEND_NAME = "python"


def conv2d_forward(x, kernels, stride, pad):
    """(n,h,w,ci) * (k,k,ci,co) -> (n,oh,ow,co), no bias, no activation."""
    n, h, w, ci = x.shape
    kh, kw, _, co = kernels.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    y = np.zeros((n, oh, ow, co))
    for p in range(kh):
        for q in range(kw):
            sl = xp[:, p : p + stride * (oh - 1) + 1 : stride,
                    q : q + stride * (ow - 1) + 1 : stride, :]
            y += sl @ kernels[p, q]
    return y


def conv2d_input_grad(gy, kernels, stride, pad, h, w):
    """Adjoint of conv2d_forward: (n,oh,ow,co) -> (n,h,w,ci)."""
    n, oh, ow, co = gy.shape
    kh, kw, ci, _ = kernels.shape
    gxp = np.zeros((n, h + 2 * pad, w + 2 * pad, ci))
    for p in range(kh):
        for q in range(kw):
            gxp[:, p : p + stride * (oh - 1) + 1 : stride,
                q : q + stride * (ow - 1) + 1 : stride, :] += gy @ kernels[p, q].T
    if pad:
        return np.ascontiguousarray(gxp[:, pad:-pad, pad:-pad, :])
    return gxp


def conv2d_kernel_grad(x, gy, ksize, stride, pad):
    """Gradient of conv2d_forward w.r.t. the kernels: -> (k,k,ci,co)."""
    n, h, w, ci = x.shape
    _, oh, ow, co = gy.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    gk = np.zeros((ksize, ksize, ci, co))
    for p in range(ksize):
        for q in range(ksize):
            sl = xp[:, p : p + stride * (oh - 1) + 1 : stride,
                    q : q + stride * (ow - 1) + 1 : stride, :]
            gk[p, q] = np.tensordot(sl, gy, axes=([0, 1, 2], [0, 1, 2]))
    return gk
