# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels; see _pykernels for the reference."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from scipy.linalg.cython_blas cimport ddot, dgemm, sdot, sgemm

cnp.import_array()

ctypedef fused real:
    float
    double


def cosine_similarity(real[:, ::1] x, real[:, ::1] t):
    cdef int n = x.shape[0], m = t.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef int inc = 1
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, m), dtype=dtype)
    cdef real[:, ::1] o = out
    cdef double[::1] xn = np.empty(n)
    cdef double[::1] tn = np.empty(m)
    cdef char ta = b"T", tb = b"N"
    cdef real one = 1.0, zero = 0.0
    if n == 0 or m == 0:
        return out
    with nogil:
        for i in range(n):
            if real is float:
                xn[i] = sqrt(sdot(&d, &x[i, 0], &inc, &x[i, 0], &inc))
            else:
                xn[i] = sqrt(ddot(&d, &x[i, 0], &inc, &x[i, 0], &inc))
        for j in range(m):
            if real is float:
                tn[j] = sqrt(sdot(&d, &t[j, 0], &inc, &t[j, 0], &inc))
            else:
                tn[j] = sqrt(ddot(&d, &t[j, 0], &inc, &t[j, 0], &inc))
        # row-major out (n x m) is column-major (m x n) = t . x^T
        if real is float:
            sgemm(&ta, &tb, &m, &n, &d, &one, &t[0, 0], &d, &x[0, 0], &d, &zero, &o[0, 0], &m)
        else:
            dgemm(&ta, &tb, &m, &n, &d, &one, &t[0, 0], &d, &x[0, 0], &d, &zero, &o[0, 0], &m)
        for i in range(n):
            for j in range(m):
                o[i, j] = <real>(o[i, j] / xn[i] / tn[j])
    return out


cdef inline bint _worse(double va, Py_ssize_t ia, double vb, Py_ssize_t ib) nogil:
    # True when (va, ia) ranks below (vb, ib): lower value, or equal value and higher index
    return va < vb or (va == vb and ia > ib)


cdef void _sift_down(double* hv, Py_ssize_t* hi, Py_ssize_t size, Py_ssize_t pos) nogil:
    # min-heap on rank: root is the worst retained element
    cdef Py_ssize_t child, best
    cdef double tv
    cdef Py_ssize_t ti
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        best = child
        if child + 1 < size and _worse(hv[child + 1], hi[child + 1], hv[child], hi[child]):
            best = child + 1
        if _worse(hv[best], hi[best], hv[pos], hi[pos]):
            tv = hv[pos]; hv[pos] = hv[best]; hv[best] = tv
            ti = hi[pos]; hi[pos] = hi[best]; hi[best] = ti
            pos = best
        else:
            break


def top_k(real[::1] values, Py_ssize_t k):
    cdef Py_ssize_t n = values.shape[0], i, size = 0, p, parent
    hv_arr = np.empty(k, dtype=np.float64)
    hi_arr = np.empty(k, dtype=np.int64)
    cdef double[::1] hv = hv_arr
    cdef cnp.int64_t[::1] hi = hi_arr
    cdef double v, tv
    cdef Py_ssize_t ti
    for i in range(n):
        v = values[i]
        if size < k:
            p = size
            hv[p] = v
            hi[p] = i
            size += 1
            while p > 0:
                parent = (p - 1) // 2
                if _worse(hv[p], hi[p], hv[parent], hi[parent]):
                    tv = hv[p]; hv[p] = hv[parent]; hv[parent] = tv
                    ti = hi[p]; hi[p] = hi[parent]; hi[parent] = ti
                    p = parent
                else:
                    break
        elif _worse(hv[0], hi[0], v, i):
            hv[0] = v
            hi[0] = i
            _sift_down(&hv[0], <Py_ssize_t*>&hi[0], size, 0)
    # heap extraction yields worst first; fill output from the back
    out = np.empty(k, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    while size > 0:
        o[size - 1] = hi[0]
        size -= 1
        hv[0] = hv[size]
        hi[0] = hi[size]
        _sift_down(&hv[0], <Py_ssize_t*>&hi[0], size, 0)
    return out


def auc_counts(double[::1] scores_sorted, cnp.int64_t[::1] labels_sorted):
    cdef Py_ssize_t n = scores_sorted.shape[0], i = 0, j
    cdef long long twice = 0, neg_below = 0, pos_here, neg_here, n_pos = 0
    while i < n:
        j = i
        while j + 1 < n and scores_sorted[j + 1] == scores_sorted[i]:
            j += 1
        pos_here = 0
        for p in range(i, j + 1):
            pos_here += labels_sorted[p]
        neg_here = (j - i + 1) - pos_here
        twice += 2 * pos_here * neg_below + pos_here * neg_here
        neg_below += neg_here
        n_pos += pos_here
        i = j + 1
    return int(twice), int(n_pos), int(n - n_pos)


def kmeans_lloyd(real[:, ::1] x, real[:, ::1] centers_in, int n_iter):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], kc = centers_in.shape[0]
    cdef Py_ssize_t i, c, f, best, it
    cdef double dist, bestd, diff
    cdef bint changed
    dtype = np.float32 if real is float else np.float64
    centers = np.array(centers_in, dtype=dtype, copy=True)
    cdef real[:, ::1] cen = centers
    labels_arr = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] labels = labels_arr
    sums_arr = np.zeros((kc, d), dtype=np.float64)
    counts_arr = np.zeros(kc, dtype=np.int64)
    cdef double[:, ::1] sums = sums_arr
    cdef cnp.int64_t[::1] counts = counts_arr
    for it in range(n_iter):
        changed = False
        for i in range(n):
            best = 0
            bestd = 0.0
            for c in range(kc):
                dist = 0.0
                for f in range(d):
                    diff = x[i, f] - cen[c, f]
                    dist += diff * diff
                if c == 0 or dist < bestd:
                    bestd = dist
                    best = c
            if labels[i] != best:
                labels[i] = best
                changed = True
        if not changed:
            break
        sums[:, :] = 0.0
        counts[:] = 0
        for i in range(n):
            c = labels[i]
            counts[c] += 1
            for f in range(d):
                sums[c, f] += x[i, f]
        for c in range(kc):
            if counts[c] > 0:
                for f in range(d):
                    cen[c, f] = <real>(sums[c, f] / counts[c])
    return labels_arr, centers
