# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled pool-adjacent-violators kernel.

Mirrors :func:`dpsw._pav_py.pav_blocks` exactly; the pure-Python module is
the reference and the fallback when this extension is not built.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def pav_blocks(double[::1] y):
    """Nondecreasing least-squares fit of ``y`` with unit weights.

    Returns ``(fit, block_id)`` where ``block_id[i]`` labels the pooled
    block containing ``i`` (labels are 0..n_blocks-1, left to right).
    """
    cdef Py_ssize_t n = y.shape[0]
    cdef Py_ssize_t i, j, k, top
    cdef double merged_sum
    cdef Py_ssize_t merged_len

    sums_arr = np.empty(n, dtype=np.float64)
    lens_arr = np.empty(n, dtype=np.int64)
    cdef double[::1] sums = sums_arr
    cdef long long[::1] lens = lens_arr

    top = -1
    for i in range(n):
        top += 1
        sums[top] = y[i]
        lens[top] = 1
        # pool while the previous block mean exceeds the current one
        while top > 0 and sums[top - 1] * lens[top] > sums[top] * lens[top - 1]:
            merged_sum = sums[top - 1] + sums[top]
            merged_len = lens[top - 1] + lens[top]
            top -= 1
            sums[top] = merged_sum
            lens[top] = merged_len

    fit_arr = np.empty(n, dtype=np.float64)
    ids_arr = np.empty(n, dtype=np.int64)
    cdef double[::1] fit = fit_arr
    cdef long long[::1] ids = ids_arr
    cdef double mean
    k = 0
    for j in range(top + 1):
        mean = sums[j] / lens[j]
        for i in range(lens[j]):
            fit[k] = mean
            ids[k] = j
            k += 1
    return fit_arr, ids_arr
