"""Raw numpy kernels for 3D convolution and its adjoints.

Arrays use the (batch, channel, depth, height, width) layout. The im2col
buffer is materialized one output depth-plane at a time, which keeps the
working set small enough to stay in cache at 48^3.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def out_extent(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def transpose_extent(n, k, stride, padding):
    return (n - 1) * stride - 2 * padding + k


def _pad_or_crop(x, lo, hi):
    """Pad spatial axes by (lo, hi) per axis; negative amounts crop."""
    pads = [(0, 0), (0, 0)]
    crops = [slice(None), slice(None)]
    for a, b in zip(lo, hi):
        pads.append((max(a, 0), max(b, 0)))
        crops.append(slice(max(-a, 0), None if b >= 0 else b))
    if any(p != (0, 0) for p in pads):
        x = np.pad(x, pads)
    return x[tuple(crops)]


def _windows(x, k, stride, padding):
    # -> (B, Cin, k, k, k, D', H', W') strided view, no copy
    if padding:
        x = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    v = sliding_window_view(x, (k, k, k), axis=(2, 3, 4))
    v = v[:, :, ::stride, ::stride, ::stride]
    return v.transpose(0, 1, 5, 6, 7, 2, 3, 4)


def conv3d_forward(x, w, stride, padding):
    B, Ci = x.shape[:2]
    Co, k = w.shape[0], w.shape[-1]
    v = _windows(x, k, stride, padding)
    Do, Ho, Wo = v.shape[5:]
    wm = w.reshape(Co, -1)
    out = np.empty((B, Co, Do, Ho, Wo), np.result_type(x, w))
    for b in range(B):
        vb = v[b]
        for d in range(Do):
            col = vb[:, :, :, :, d].reshape(Ci * k ** 3, Ho * Wo)
            out[b, :, d] = (wm @ col).reshape(Co, Ho, Wo)
    return out


def conv3d_weight_grad(x, gout, k, stride, padding):
    B, Ci = x.shape[:2]
    Co = gout.shape[1]
    v = _windows(x, k, stride, padding)
    Do, Ho, Wo = v.shape[5:]
    gw = np.zeros((Co, Ci * k ** 3), np.result_type(x, gout))
    for b in range(B):
        vb = v[b]
        for d in range(Do):
            col = vb[:, :, :, :, d].reshape(Ci * k ** 3, Ho * Wo)
            gw += gout[b, :, d].reshape(Co, Ho * Wo) @ col.T
    return gw.reshape(Co, Ci, k, k, k)


def conv3d_input_grad(gout, w, stride, padding, in_spatial):
    """Adjoint of conv3d_forward w.r.t. its input (the transposed convolution)."""
    Co, Ci, k = w.shape[0], w.shape[1], w.shape[-1]
    B = gout.shape[0]
    Do, Ho, Wo = gout.shape[2:]
    D, H, W = in_spatial
    dtype = np.result_type(gout, w)
    if stride == 1:
        # full correlation with the flipped, channel-swapped kernel
        lo = k - 1 - padding
        hi = [n + k - 1 - lo - m for n, m in zip(in_spatial, (Do, Ho, Wo))]
        gp = _pad_or_crop(gout, (lo,) * 3, hi)
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        return conv3d_forward(gp, wf, 1, 0).astype(dtype, copy=False)
    s = stride
    gx = np.zeros((B, Ci, D + 2 * padding + k, H + 2 * padding + k, W + 2 * padding + k), dtype)
    wt = w.reshape(Co, -1).T
    for b in range(B):
        cols = (wt @ gout[b].reshape(Co, -1)).reshape(Ci, k, k, k, Do, Ho, Wo)
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    gx[b, :, i:i + s * Do:s, j:j + s * Ho:s, l:l + s * Wo:s] += cols[:, i, j, l]
    p = padding
    return gx[:, :, p:p + D, p:p + H, p:p + W]
