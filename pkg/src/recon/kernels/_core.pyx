# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled ragged pooling kernels (hot path of encoding and its backward)."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def pool_mean(double[:, ::1] table, cnp.int64_t[::1] ids, cnp.int64_t[::1] offsets):
    cdef Py_ssize_t B = offsets.shape[0] - 1
    cdef Py_ssize_t d = table.shape[1]
    out_arr = np.zeros((B, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, k, j, start, stop
    cdef cnp.int64_t row
    cdef double inv
    with nogil:
        for b in range(B):
            start = offsets[b]
            stop = offsets[b + 1]
            for k in range(start, stop):
                row = ids[k]
                for j in range(d):
                    out[b, j] += table[row, j]
            inv = 1.0 / (stop - start)
            for j in range(d):
                out[b, j] *= inv
    return out_arr


def scatter_mean_grad(double[:, ::1] grad, cnp.int64_t[::1] ids,
                      cnp.int64_t[::1] offsets, double[:, ::1] gout):
    cdef Py_ssize_t B = offsets.shape[0] - 1
    cdef Py_ssize_t d = grad.shape[1]
    cdef Py_ssize_t b, k, j, start, stop
    cdef cnp.int64_t row
    cdef double inv
    with nogil:
        for b in range(B):
            start = offsets[b]
            stop = offsets[b + 1]
            inv = 1.0 / (stop - start)
            for k in range(start, stop):
                row = ids[k]
                for j in range(d):
                    grad[row, j] += gout[b, j] * inv
