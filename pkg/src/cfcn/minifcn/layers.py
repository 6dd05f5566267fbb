"""Forward/backward primitives on NHWC arrays.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)``.
"""

import numpy as np


def conv_forward(x, w, b):
    """Same-padded stride-1 convolution. ``w`` has shape (C_out, C_in, k, k)."""
    k = w.shape[2]
    pad = k // 2
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    # im2col with rows ordered (ki, kj, c) so every copy moves contiguous channel runs
    cols = np.empty((n, h, wd, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + wd, :]
    cols = cols.reshape(n * h * wd, k * k * c)
    wmat = w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)
    out = cols @ wmat.T + b
    return out.reshape(n, h, wd, w.shape[0]), (cols, x.shape, w)


def conv_backward(dout, cache):
    cols, xshape, w = cache
    n, h, wd, c = xshape
    cout, _, k, _ = w.shape
    pad = k // 2
    dmat = dout.reshape(-1, cout)
    dw = (dmat.T @ cols).reshape(cout, k, k, c).transpose(0, 3, 1, 2)
    db = dmat.sum(axis=0)
    dcols = (dmat @ w.transpose(0, 2, 3, 1).reshape(cout, -1)).reshape(n, h, wd, k, k, c)
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, pad:pad + h, pad:pad + wd, :] if pad else dxp
    return dx, np.ascontiguousarray(dw), db


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def maxpool_forward(x):
    """2x2 max pooling, stride 2; ties resolve to the first element in the window."""
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def maxpool_backward(dout, cache):
    arg, shape = cache
    n, h, w, c = shape
    dwin = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    return dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(shape)


def upsample_forward(x):
    """Nearest-neighbour x2 upsampling."""
    return x.repeat(2, axis=1).repeat(2, axis=2), x.shape


def upsample_backward(dout, shape):
    n, h, w, c = shape
    return dout.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
