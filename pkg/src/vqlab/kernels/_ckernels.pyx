# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled nearest-entry search.

Thin driver over ``vq_kernels.h``: token rows are split into blocks (the
parallel axis), and each block sweeps the transposed codebook in chunks
small enough to stay in L1/L2.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport parallel, prange
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef extern from "vq_kernels.h" nogil:
    int VQ_ROWS
    void vq_score_rows(const double* z, Py_ssize_t nrows, const double* bt,
                       const double* bn, Py_ssize_t n, Py_ssize_t dim,
                       Py_ssize_t j0, Py_ssize_t jn, double* acc,
                       Py_ssize_t stride)
    void vq_block_min(const double* a, Py_ssize_t jn, Py_ssize_t j0,
                      double* best, long long* index)
    void vq_block_topm(const double* a, Py_ssize_t jn, Py_ssize_t j0,
                       Py_ssize_t m, double* top, long long* idx)

cdef enum:
    TOKEN_BLOCK = 64


cdef inline Py_ssize_t _code_block(Py_ssize_t dim) noexcept nogil:
    # dim * block doubles of codebook per chunk, about 32 KiB
    cdef Py_ssize_t cb = 4096 // dim
    if cb < 64:
        cb = 64
    if cb > 1024:
        cb = 1024
    return cb


def nearest(const double[:, ::1] z, const double[:, ::1] bt,
            const double[::1] bn, int num_threads=1):
    """Index of the minimum score per row; ties go to the lowest index.

    ``bt`` is the codebook transposed to (dim, n) and ``bn`` its squared row
    norms. Returns ``(indices, scores)`` where scores omit ``||z||^2``.
    """
    cdef Py_ssize_t t = z.shape[0]
    cdef Py_ssize_t dim = z.shape[1]
    cdef Py_ssize_t n = bt.shape[1]
    cdef Py_ssize_t cblock = _code_block(dim)
    cdef Py_ssize_t n_tblocks = (t + TOKEN_BLOCK - 1) // TOKEN_BLOCK
    idx_arr = np.zeros(t, dtype=np.int64)
    best_arr = np.full(t, np.inf)
    cdef long long[::1] idx = idx_arr
    cdef double[::1] best = best_arr
    cdef const double* zp
    cdef const double* btp
    cdef const double* bnp
    cdef double* acc
    cdef Py_ssize_t tb, i, i0, i1, r, nr, j0, jn
    if t == 0 or n == 0:
        return idx_arr, best_arr
    zp = &z[0, 0]
    btp = &bt[0, 0]
    bnp = &bn[0]
    with nogil, parallel(num_threads=num_threads):
        acc = <double*>malloc(VQ_ROWS * cblock * sizeof(double))
        for tb in prange(n_tblocks, schedule="static"):
            i0 = tb * TOKEN_BLOCK
            i1 = i0 + TOKEN_BLOCK
            if i1 > t:
                i1 = t
            j0 = 0
            while j0 < n:
                jn = n - j0
                if jn > cblock:
                    jn = cblock
                i = i0
                while i < i1:
                    nr = i1 - i
                    if nr > VQ_ROWS:
                        nr = VQ_ROWS
                    vq_score_rows(zp + i * dim, nr, btp, bnp, n, dim,
                                  j0, jn, acc, cblock)
                    for r in range(nr):
                        vq_block_min(acc + r * cblock, jn, j0,
                                     &best[i + r], &idx[i + r])
                    i = i + nr
                j0 = j0 + jn
        free(acc)
    return idx_arr, best_arr


def knn(const double[:, ::1] z, const double[:, ::1] bt,
        const double[::1] bn, Py_ssize_t m, int num_threads=1):
    """The ``m`` lowest scores per row, ascending, equal scores by index."""
    cdef Py_ssize_t t = z.shape[0]
    cdef Py_ssize_t dim = z.shape[1]
    cdef Py_ssize_t n = bt.shape[1]
    cdef Py_ssize_t cblock = _code_block(dim)
    cdef Py_ssize_t n_tblocks = (t + TOKEN_BLOCK - 1) // TOKEN_BLOCK
    idx_arr = np.zeros((t, m), dtype=np.int64)
    top_arr = np.full((t, m), np.inf)
    cdef long long[:, ::1] idx = idx_arr
    cdef double[:, ::1] top = top_arr
    cdef const double* zp
    cdef const double* btp
    cdef const double* bnp
    cdef double* acc
    cdef Py_ssize_t tb, i, i0, i1, r, nr, j0, jn
    if t == 0 or n == 0 or m == 0:
        return idx_arr, top_arr
    zp = &z[0, 0]
    btp = &bt[0, 0]
    bnp = &bn[0]
    with nogil, parallel(num_threads=num_threads):
        acc = <double*>malloc(VQ_ROWS * cblock * sizeof(double))
        for tb in prange(n_tblocks, schedule="static"):
            i0 = tb * TOKEN_BLOCK
            i1 = i0 + TOKEN_BLOCK
            if i1 > t:
                i1 = t
            j0 = 0
            while j0 < n:
                jn = n - j0
                if jn > cblock:
                    jn = cblock
                i = i0
                while i < i1:
                    nr = i1 - i
                    if nr > VQ_ROWS:
                        nr = VQ_ROWS
                    vq_score_rows(zp + i * dim, nr, btp, bnp, n, dim,
                                  j0, jn, acc, cblock)
                    for r in range(nr):
                        vq_block_topm(acc + r * cblock, jn, j0, m,
                                      &top[i + r, 0], &idx[i + r, 0])
                    i = i + nr
                j0 = j0 + jn
        free(acc)
    return idx_arr, top_arr
