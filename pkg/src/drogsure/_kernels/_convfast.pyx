# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels.

Each kernel offset (p, q) contributes one BLAS dgemm over the channel axes;
the strided offset slab is first compacted into a reusable contiguous buffer
by a C gather loop.  This keeps the working set at one input-sized buffer
(im2col would blow it up k*k-fold) while all arithmetic runs in BLAS.
1x1 stride-1 kernels skip the gather entirely.  Layouts and results match
_convpy exactly.
"""

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

BACKEND_NAME = "compiled"


cdef void _mm(double* a, double* b, double* c, int m, int n, int k,
              bint ta, bint tb, double beta) noexcept nogil:
    # row-major C (m,n) = op(A) @ op(B) + beta*C
    # op(A): (m,k), stored (k,m) when ta; op(B): (k,n), stored (n,k) when tb
    cdef char nt = b'N', tt = b'T'
    cdef char* transa = &nt
    cdef char* transb = &nt
    cdef double one = 1.0
    cdef int lda = m if ta else k
    cdef int ldb = k if tb else n
    if tb:
        transa = &tt
    if ta:
        transb = &tt
    dgemm(transa, transb, &n, &m, &k, &one, b, &ldb, a, &lda, &beta, c, &n)


cdef void _gather_offset(double[:, :, :, ::1] xp, double[:, ::1] buf,
                         Py_ssize_t p, Py_ssize_t q, Py_ssize_t oh,
                         Py_ssize_t ow, Py_ssize_t stride) noexcept nogil:
    cdef Py_ssize_t n = xp.shape[0], ci = xp.shape[3]
    cdef Py_ssize_t b, i, j, c, row
    for b in range(n):
        for i in range(oh):
            row = (b * oh + i) * ow
            for j in range(ow):
                for c in range(ci):
                    buf[row + j, c] = xp[b, i * stride + p, j * stride + q, c]


cdef void _scatter_offset(double[:, ::1] buf, double[:, :, :, ::1] gxp,
                          Py_ssize_t p, Py_ssize_t q, Py_ssize_t oh,
                          Py_ssize_t ow, Py_ssize_t stride) noexcept nogil:
    cdef Py_ssize_t n = gxp.shape[0], ci = gxp.shape[3]
    cdef Py_ssize_t b, i, j, c, row
    for b in range(n):
        for i in range(oh):
            row = (b * oh + i) * ow
            for j in range(ow):
                for c in range(ci):
                    gxp[b, i * stride + p, j * stride + q, c] += buf[row + j, c]


cdef _pad(cnp.ndarray x, int pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def conv2d_forward(x, kernels, int stride, int pad):
    """(n,h,w,ci) * (k,k,ci,co) -> (n,oh,ow,co), no bias, no activation."""
    cdef cnp.ndarray xa = np.ascontiguousarray(x)
    cdef cnp.ndarray ka = np.ascontiguousarray(kernels)
    cdef int n = xa.shape[0], h = xa.shape[1], w = xa.shape[2], ci = xa.shape[3]
    cdef int k = ka.shape[0], co = ka.shape[3]
    cdef int oh = (h + 2 * pad - k) // stride + 1
    cdef int ow = (w + 2 * pad - k) // stride + 1
    cdef int rows = n * oh * ow
    cdef int p, q
    out = np.empty((n, oh, ow, co))
    cdef double[:, :, :, ::1] yv = out
    cdef double[:, :, :, ::1] kv = ka
    cdef double[:, :, :, ::1] xv
    cdef double[:, ::1] bv
    if k == 1 and stride == 1 and pad == 0:
        xv = xa
        _mm(&xv[0, 0, 0, 0], &kv[0, 0, 0, 0], &yv[0, 0, 0, 0],
            rows, co, ci, False, False, 0.0)
        return out
    xp = _pad(xa, pad)
    xv = xp
    buf = np.empty((rows, ci))
    bv = buf
    cdef double beta = 0.0
    for p in range(k):
        for q in range(k):
            _gather_offset(xv, bv, p, q, oh, ow, stride)
            _mm(&bv[0, 0], &kv[p, q, 0, 0], &yv[0, 0, 0, 0],
                rows, co, ci, False, False, beta)
            beta = 1.0
    return out


def conv2d_input_grad(gy, kernels, int stride, int pad, int h, int w):
    """Adjoint of conv2d_forward: (n,oh,ow,co) -> (n,h,w,ci)."""
    cdef cnp.ndarray ga = np.ascontiguousarray(gy)
    cdef cnp.ndarray ka = np.ascontiguousarray(kernels)
    cdef int n = ga.shape[0], oh = ga.shape[1], ow = ga.shape[2], co = ga.shape[3]
    cdef int k = ka.shape[0], ci = ka.shape[2]
    cdef int rows = n * oh * ow
    cdef int p, q
    cdef double[:, :, :, ::1] gv = ga
    cdef double[:, :, :, ::1] kv = ka
    cdef double[:, :, :, ::1] xv
    cdef double[:, ::1] bv
    if k == 1 and stride == 1 and pad == 0:
        out = np.empty((n, h, w, ci))
        xv = out
        _mm(&gv[0, 0, 0, 0], &kv[0, 0, 0, 0], &xv[0, 0, 0, 0],
            rows, ci, co, False, True, 0.0)
        return out
    gxp = np.zeros((n, h + 2 * pad, w + 2 * pad, ci))
    xv = gxp
    buf = np.empty((rows, ci))
    bv = buf
    for p in range(k):
        for q in range(k):
            _mm(&gv[0, 0, 0, 0], &kv[p, q, 0, 0], &bv[0, 0],
                rows, ci, co, False, True, 0.0)
            _scatter_offset(bv, xv, p, q, oh, ow, stride)
    if pad:
        return np.ascontiguousarray(gxp[:, pad:-pad, pad:-pad, :])
    return gxp


def conv2d_kernel_grad(x, gy, int ksize, int stride, int pad):
    """Gradient of conv2d_forward w.r.t. the kernels: -> (k,k,ci,co)."""
    cdef cnp.ndarray xa = np.ascontiguousarray(x)
    cdef cnp.ndarray ga = np.ascontiguousarray(gy)
    cdef int n = xa.shape[0], h = xa.shape[1], w = xa.shape[2], ci = xa.shape[3]
    cdef int oh = ga.shape[1], ow = ga.shape[2], co = ga.shape[3]
    cdef int rows = n * oh * ow
    cdef int p, q
    out = np.zeros((ksize, ksize, ci, co))
    cdef double[:, :, :, ::1] gkv = out
    cdef double[:, :, :, ::1] gv = ga
    cdef double[:, :, :, ::1] xv
    cdef double[:, ::1] bv
    if ksize == 1 and stride == 1 and pad == 0:
        xv = xa
        _mm(&xv[0, 0, 0, 0], &gv[0, 0, 0, 0], &gkv[0, 0, 0, 0],
            ci, co, rows, True, False, 0.0)
        return out
    xp = _pad(xa, pad)
    xv = xp
    buf = np.empty((rows, ci))
    bv = buf
    for p in range(ksize):
        for q in range(ksize):
            _gather_offset(xv, bv, p, q, oh, ow, stride)
            _mm(&bv[0, 0], &gv[0, 0, 0, 0], &gkv[p, q, 0, 0],
                ci, co, rows, True, False, 0.0)
    return out
