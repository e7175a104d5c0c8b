# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the convolution stem and pairwise distances.

Semantics match numpy_backend exactly (up to floating-point summation
order); single-threaded on purpose so training runs stay deterministic.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w, const double[::1] b):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = h - kh + 1, wo = wd - kw + 1
    out_arr = np.empty((n, o, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ni, oi, ci, i, j, di, dj
    cdef double acc
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oi]
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += x[ni, ci, i + di, j + dj] * w[oi, ci, di, dj]
                    out[ni, oi, i, j] = acc
    return out_arr


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, :, ::1] grad_out):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = h - kh + 1, wo = wd - kw + 1
    gx_arr = np.zeros((n, c, h, wd), dtype=np.float64)
    gw_arr = np.zeros((o, c, kh, kw), dtype=np.float64)
    gb_arr = np.zeros(o, dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef Py_ssize_t ni, oi, ci, i, j, di, dj
    cdef double g
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    g = grad_out[ni, oi, i, j]
                    gb[oi] += g
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                gx[ni, ci, i + di, j + dj] += g * w[oi, ci, di, dj]
                                gw[oi, ci, di, dj] += g * x[ni, ci, i + di, j + dj]
    return gx_arr, gw_arr, gb_arr


def pairwise_sqdist(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], d = a.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                diff = a[i, k] - b[j, k]
                acc += diff * diff
            out[i, j] = acc
    return out_arr
