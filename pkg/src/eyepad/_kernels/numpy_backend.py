"""Numpy implementations of the hot kernels.

Used as the fallback when the compiled extension is unavailable and as the
reference implementation the compiled kernels are checked against. All
arrays are float64; shapes follow the (N, C, H, W) convention for images
and (O, C, kh, kw) for filters. Convolutions are "valid" cross-correlations.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, w, b):
    """Valid cross-correlation of x (N,C,H,W) with w (O,C,kh,kw) plus bias (O,)."""
    kh, kw = w.shape[2], w.shape[3]
    patches = sliding_window_view(x, (kh, kw), axis=(2, 3))  # (N,C,Ho,Wo,kh,kw)
    out = np.einsum("nchwij,ocij->nohw", patches, w, optimize=True)
    out += b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x, w, grad_out):
    """Gradients of conv2d_forward w.r.t. input, weights and bias."""
    kh, kw = w.shape[2], w.shape[3]
    patches = sliding_window_view(x, (kh, kw), axis=(2, 3))
    grad_w = np.einsum("nchwij,nohw->ocij", patches, grad_out, optimize=True)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    # full correlation of grad_out with the 180-degree rotated filters
    padded = np.pad(grad_out, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    gpatches = sliding_window_view(padded, (kh, kw), axis=(2, 3))  # (N,O,H,W,kh,kw)
    w_rot = w[:, :, ::-1, ::-1]
    grad_x = np.einsum("nohwij,ocij->nchw", gpatches, w_rot, optimize=True)
    return (
        np.ascontiguousarray(grad_x),
        np.ascontiguousarray(grad_w),
        np.ascontiguousarray(grad_b),
    )


def pairwise_sqdist(a, b):
    """Squared euclidean distances between rows of a (n,d) and b (m,d)."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("nmd,nmd->nm", diff, diff)
