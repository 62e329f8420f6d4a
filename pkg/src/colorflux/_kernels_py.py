"""Pure-numpy convolution kernels (fallback when the compiled core is absent).

Stride 1, zero "same" padding, odd square kernels, NCHW layout.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "numpy"


def _cols(x, k):
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, C, H, W, k, k
    b, c, h, w = x.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * k * k)


def conv2d_forward(x, w, b):
    B, _, H, W = x.shape
    cout, _, k, _ = w.shape
    y = _cols(x, k) @ w.reshape(cout, -1).T + b
    return np.ascontiguousarray(y.reshape(B, H, W, cout).transpose(0, 3, 1, 2))


def conv2d_backward(x, w, dy):
    """Return ``(dx, dw, db)`` for ``y = conv2d_forward(x, w, b)``."""
    B, cin, H, W = x.shape
    cout, _, k, _ = w.shape
    dy2 = dy.transpose(0, 2, 3, 1).reshape(B * H * W, cout)
    dw = (dy2.T @ _cols(x, k)).reshape(w.shape)
    db = dy2.sum(axis=0)
    wf = w[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(cout * k * k, cin)
    dx = _cols(dy, k) @ wf
    dx = np.ascontiguousarray(dx.reshape(B, H, W, cin).transpose(0, 3, 1, 2))
    return dx, dw, db
