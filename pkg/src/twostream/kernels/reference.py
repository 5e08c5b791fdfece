"""Pure-numpy convolution kernels (im2col + BLAS matmul).

Same contracts as the compiled backend in ``_fastconv``:
all convolutions are stride 1 with zero padding that preserves spatial size.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x, kh, kw):
    c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (c, h, w, kh, kw)
    return win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, h * w)


def _col2im(gcols, c, h, w, kh, kw):
    ph, pw = kh // 2, kw // 2
    gwin = gcols.reshape(c, kh, kw, h, w)
    gxp = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + h, j:j + w] += gwin[:, i, j]
    return np.ascontiguousarray(gxp[:, ph:ph + h, pw:pw + w])


def conv2d_forward(x, w):
    """x: (c_in, h, w) map, w: (c_out, c_in, kh, kw) kernels -> (c_out, h, w)."""
    c, h, ww = x.shape
    co, _, kh, kw = w.shape
    cols = _im2col(x, kh, kw)
    y = w.reshape(co, -1) @ cols
    return y.reshape(co, h, ww)


def conv2d_backward(x, w, gy):
    """Gradients (gx, gw) of sum(gy * conv2d_forward(x, w))."""
    c, h, ww = x.shape
    co, _, kh, kw = w.shape
    cols = _im2col(x, kh, kw)
    gy2 = gy.reshape(co, -1)
    gw = (gy2 @ cols.T).reshape(w.shape)
    gcols = w.reshape(co, -1).T @ gy2
    gx = _col2im(gcols, c, h, ww, kh, kw)
    return gx, gw


def conv1d_forward(x, k):
    """Cross-correlation of a 1-d signal with an odd-length kernel, zero padded."""
    return np.convolve(x, k[::-1], mode="same")


def conv1d_backward(x, k, gy):
    s = (len(k) - 1) // 2
    gx = np.convolve(gy, k, mode="same")
    gk = np.correlate(np.pad(x, (s, s)), gy, mode="valid")
    return gx, gk
