# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im kernels for the convolution hot loop."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def im2col(double[:, :, :, ::1] padded, int kh, int kw, int stride):
    cdef Py_ssize_t n = padded.shape[0]
    cdef Py_ssize_t c = padded.shape[1]
    cdef Py_ssize_t hp = padded.shape[2]
    cdef Py_ssize_t wp = padded.shape[3]
    cdef Py_ssize_t oh = (hp - kh) // stride + 1
    cdef Py_ssize_t ow = (wp - kw) // stride + 1
    out_arr = np.empty((n, c * kh * kw, oh * ow), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, y, x, row
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(oh):
                            for x in range(ow):
                                out[b, row, y * ow + x] = padded[
                                    b, ch, y * stride + i, x * stride + j]
    return out_arr


def col2im(double[:, :, ::1] cols, int n, int c, int hp, int wp,
           int kh, int kw, int stride):
    cdef Py_ssize_t oh = (hp - kh) // stride + 1
    cdef Py_ssize_t ow = (wp - kw) // stride + 1
    out_arr = np.zeros((n, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, y, x, row
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for y in range(oh):
                            for x in range(ow):
                                out[b, ch, y * stride + i, x * stride + j] += cols[
                                    b, row, y * ow + x]
    return out_arr
