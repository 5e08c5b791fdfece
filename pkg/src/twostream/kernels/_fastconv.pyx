# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution kernels: C im2col/col2im plus BLAS gemm.

Drop-in replacement for ``reference.py``; selected at import by the
``twostream.kernels`` package when available.
"""

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused floating:
    float
    double


# Row-major C[m,n] = A[m,k] @ B[k,n], expressed as column-major C^T = B^T A^T.
cdef void _gemm_nn(floating* a, floating* b, floating* c,
                   int m, int k, int n) noexcept nogil:
    cdef char tn = b'N'
    cdef floating one = 1, zero = 0
    if floating is float:
        sgemm(&tn, &tn, &n, &m, &k, &one, b, &n, a, &k, &zero, c, &n)
    else:
        dgemm(&tn, &tn, &n, &m, &k, &one, b, &n, a, &k, &zero, c, &n)


# Row-major C[m,n] = A[m,k] @ B[n,k]^T.
cdef void _gemm_nt(floating* a, floating* b, floating* c,
                   int m, int k, int n) noexcept nogil:
    cdef char tt = b'T', tn = b'N'
    cdef floating one = 1, zero = 0
    if floating is float:
        sgemm(&tt, &tn, &n, &m, &k, &one, b, &k, a, &k, &zero, c, &n)
    else:
        dgemm(&tt, &tn, &n, &m, &k, &one, b, &k, a, &k, &zero, c, &n)


# Row-major C[m,n] = A[k,m]^T @ B[k,n].
cdef void _gemm_tn(floating* a, floating* b, floating* c,
                   int m, int k, int n) noexcept nogil:
    cdef char tn = b'N', tt = b'T'
    cdef floating one = 1, zero = 0
    if floating is float:
        sgemm(&tn, &tt, &n, &m, &k, &one, b, &n, a, &m, &zero, c, &n)
    else:
        dgemm(&tn, &tt, &n, &m, &k, &one, b, &n, a, &m, &zero, c, &n)


cdef void _im2col(floating[:, :, ::1] x, floating[:, ::1] cols,
                  int kh, int kw) noexcept nogil:
    cdef int c = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef int ph = kh // 2, pw = kw // 2
    cdef int ch, i, j, row, y, xx, sy, sx
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ch * kh + i) * kw + j
                for y in range(h):
                    sy = y + i - ph
                    if sy < 0 or sy >= h:
                        for xx in range(w):
                            cols[row, y * w + xx] = 0
                        continue
                    for xx in range(w):
                        sx = xx + j - pw
                        if sx < 0 or sx >= w:
                            cols[row, y * w + xx] = 0
                        else:
                            cols[row, y * w + xx] = x[ch, sy, sx]


cdef void _col2im(floating[:, ::1] gcols, floating[:, :, ::1] gx,
                  int kh, int kw) noexcept nogil:
    cdef int c = gx.shape[0], h = gx.shape[1], w = gx.shape[2]
    cdef int ph = kh // 2, pw = kw // 2
    cdef int ch, i, j, row, y, xx, sy, sx
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                row = (ch * kh + i) * kw + j
                for y in range(h):
                    sy = y + i - ph
                    if sy < 0 or sy >= h:
                        continue
                    for xx in range(w):
                        sx = xx + j - pw
                        if 0 <= sx < w:
                            gx[ch, sy, sx] += gcols[row, y * w + xx]


def _conv2d_forward_impl(floating[:, :, ::1] x, floating[:, :, :, ::1] w):
    cdef int c = x.shape[0], h = x.shape[1], ww = x.shape[2]
    cdef int co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    dtype = np.float32 if floating is float else np.float64
    cols_np = np.empty((c * kh * kw, h * ww), dtype=dtype)
    y_np = np.empty((co, h * ww), dtype=dtype)
    cdef floating[:, ::1] cols = cols_np
    cdef floating[:, ::1] y = y_np
    cdef floating[:, ::1] w2 = np.asarray(w).reshape(co, c * kh * kw)
    with nogil:
        _im2col(x, cols, kh, kw)
        _gemm_nn(&w2[0, 0], &cols[0, 0], &y[0, 0], co, c * kh * kw, h * ww)
    return y_np.reshape(co, h, ww)


def _conv2d_backward_impl(floating[:, :, ::1] x, floating[:, :, :, ::1] w,
                          floating[:, :, ::1] gy):
    cdef int c = x.shape[0], h = x.shape[1], ww = x.shape[2]
    cdef int co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int ckk = c * kh * kw, hw = h * ww
    dtype = np.float32 if floating is float else np.float64
    cols_np = np.empty((ckk, hw), dtype=dtype)
    gw_np = np.empty((co, ckk), dtype=dtype)
    gcols_np = np.empty((ckk, hw), dtype=dtype)
    gx_np = np.zeros((c, h, ww), dtype=dtype)
    cdef floating[:, ::1] cols = cols_np
    cdef floating[:, ::1] gw = gw_np
    cdef floating[:, ::1] gcols = gcols_np
    cdef floating[:, :, ::1] gx = gx_np
    cdef floating[:, ::1] w2 = np.asarray(w).reshape(co, ckk)
    cdef floating[:, ::1] gy2 = np.asarray(gy).reshape(co, hw)
    with nogil:
        _im2col(x, cols, kh, kw)
        _gemm_nt(&gy2[0, 0], &cols[0, 0], &gw[0, 0], co, hw, ckk)
        _gemm_tn(&w2[0, 0], &gy2[0, 0], &gcols[0, 0], ckk, co, hw)
        _col2im(gcols, gx, kh, kw)
    return gx_np, gw_np.reshape(co, c, kh, kw)


def _conv1d_forward_impl(floating[::1] x, floating[::1] k):
    cdef int n = x.shape[0], kl = k.shape[0], s = kl // 2
    dtype = np.float32 if floating is float else np.float64
    y_np = np.zeros(n, dtype=dtype)
    cdef floating[::1] y = y_np
    cdef int i, j, t
    cdef floating acc
    with nogil:
        for i in range(n):
            acc = 0
            for j in range(kl):
                t = i + j - s
                if 0 <= t < n:
                    acc += k[j] * x[t]
            y[i] = acc
    return y_np


def _conv1d_backward_impl(floating[::1] x, floating[::1] k, floating[::1] gy):
    cdef int n = x.shape[0], kl = k.shape[0], s = kl // 2
    dtype = np.float32 if floating is float else np.float64
    gx_np = np.zeros(n, dtype=dtype)
    gk_np = np.zeros(kl, dtype=dtype)
    cdef floating[::1] gx = gx_np
    cdef floating[::1] gk = gk_np
    cdef int i, j, t
    with nogil:
        for i in range(n):
            for j in range(kl):
                t = i + j - s
                if 0 <= t < n:
                    gx[t] += k[j] * gy[i]
                    gk[j] += x[t] * gy[i]
    return gx_np, gk_np


def conv2d_forward(x, w):
    return _conv2d_forward_impl(np.ascontiguousarray(x), np.ascontiguousarray(w))


def conv2d_backward(x, w, gy):
    return _conv2d_backward_impl(np.ascontiguousarray(x), np.ascontiguousarray(w),
                                 np.ascontiguousarray(gy))


def conv1d_forward(x, k):
    return _conv1d_forward_impl(np.ascontiguousarray(x), np.ascontiguousarray(k))


def conv1d_backward(x, k, gy):
    return _conv1d_backward_impl(np.ascontiguousarray(x), np.ascontiguousarray(k),
                                 np.ascontiguousarray(gy))
