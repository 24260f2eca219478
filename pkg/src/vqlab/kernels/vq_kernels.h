/* Blocked nearest-entry scoring.
 *
 * score(i, j) = ||b_j||^2 - 2 <z_i, b_j>, accumulated in double. The codebook
 * is passed transposed (dim x n) so the code index is the unit-stride axis.
 * Four token rows share each codebook load.
 */
#ifndef VQ_KERNELS_H
#define VQ_KERNELS_H

#include <stddef.h>

#define VQ_ROWS 4

static inline void vq_score_rows(const double *restrict z, ptrdiff_t nrows,
                                 const double *restrict bt,
                                 const double *restrict bn, ptrdiff_t n,
                                 ptrdiff_t dim, ptrdiff_t j0, ptrdiff_t jn,
                                 double *restrict acc, ptrdiff_t stride)
{
    ptrdiff_t r, d, j;
    for (r = 0; r < nrows; ++r) {
        double *restrict a = acc + r * stride;
        for (j = 0; j < jn; ++j)
            a[j] = 0.0;
    }
    if (nrows == VQ_ROWS) {
        double *restrict a0 = acc;
        double *restrict a1 = acc + stride;
        double *restrict a2 = acc + 2 * stride;
        double *restrict a3 = acc + 3 * stride;
        for (d = 0; d < dim; ++d) {
            const double *restrict row = bt + d * n + j0;
            const double z0 = z[d], z1 = z[dim + d];
            const double z2 = z[2 * dim + d], z3 = z[3 * dim + d];
#pragma omp simd
            for (j = 0; j < jn; ++j) {
                const double b = row[j];
                a0[j] += z0 * b;
                a1[j] += z1 * b;
                a2[j] += z2 * b;
                a3[j] += z3 * b;
            }
        }
    } else {
        for (r = 0; r < nrows; ++r) {
            double *restrict a = acc + r * stride;
            for (d = 0; d < dim; ++d) {
                const double *restrict row = bt + d * n + j0;
                const double zd = z[r * dim + d];
#pragma omp simd
                for (j = 0; j < jn; ++j)
                    a[j] += zd * row[j];
            }
        }
    }
    for (r = 0; r < nrows; ++r) {
        double *restrict a = acc + r * stride;
        const double *restrict bnb = bn + j0;
#pragma omp simd
        for (j = 0; j < jn; ++j)
            a[j] = bnb[j] - 2.0 * a[j];
    }
}

/* Update a running (best, index) pair from one scored block; strict '<'
 * across blocks and first occurrence within a block give lowest-index ties. */
static inline void vq_block_min(const double *restrict a, ptrdiff_t jn,
                                ptrdiff_t j0, double *best, long long *index)
{
    ptrdiff_t j;
    double m = a[0];
#pragma omp simd reduction(min : m)
    for (j = 0; j < jn; ++j)
        m = a[j] < m ? a[j] : m;
    if (m < *best) {
        for (j = 0; j < jn; ++j) {
            if (a[j] == m) {
                *best = m;
                *index = (long long)(j0 + j);
                return;
            }
        }
    }
}

/* Insert block scores into an ascending top-m list; equal scores keep the
 * earlier (lower) index first. */
static inline void vq_block_topm(const double *restrict a, ptrdiff_t jn,
                                 ptrdiff_t j0, ptrdiff_t m,
                                 double *restrict top, long long *restrict idx)
{
    ptrdiff_t j, k;
    for (j = 0; j < jn; ++j) {
        const double s = a[j];
        if (s < top[m - 1]) {
            k = m - 1;
            while (k > 0 && top[k - 1] > s) {
                top[k] = top[k - 1];
                idx[k] = idx[k - 1];
                --k;
            }
            top[k] = s;
            idx[k] = (long long)(j0 + j);
        }
    }
}

#endif
