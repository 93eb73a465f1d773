# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; see ``_pykernels`` for the reference semantics."""
import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def assignment_core(cost):
    cdef double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0]
    cdef Py_ssize_t m = c.shape[1]
    cdef double[::1] u = np.zeros(m + 1)
    cdef double[::1] v = np.zeros(n + 1)
    cdef double[::1] minv = np.empty(n + 1)
    cdef Py_ssize_t[::1] p = np.zeros(n + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] way = np.zeros(n + 1, dtype=np.intp)
    cdef unsigned char[::1] used = np.zeros(n + 1, dtype=np.uint8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur, ui0

    for i in range(1, m + 1):
        p[0] = i
        j0 = 0
        for j in range(n + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            ui0 = u[i0]
            delta = INFINITY
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = c[j - 1, i0 - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break

    rows = np.full(m, -1, dtype=np.intp)
    cdef Py_ssize_t[::1] r = rows
    for j in range(1, n + 1):
        if p[j]:
            r[p[j] - 1] = j - 1
    return rows, np.asarray(u[1:]).copy(), np.asarray(v[1:]).copy()


def greedy_match(ious, double thr):
    cdef double[:, ::1] a = np.ascontiguousarray(ious, dtype=np.float64)
    cdef Py_ssize_t n_det = a.shape[0]
    cdef Py_ssize_t n_gt = a.shape[1]
    cdef unsigned char[::1] taken = np.zeros(n_gt, dtype=np.uint8)
    out = np.full(n_det, -1, dtype=np.intp)
    cdef Py_ssize_t[::1] o = out
    cdef Py_ssize_t d, g, best
    cdef double best_iou, val
    for d in range(n_det):
        best = -1
        best_iou = thr
        for g in range(n_gt):
            if taken[g]:
                continue
            val = a[d, g]
            if val >= best_iou and (best < 0 or val > best_iou):
                best = g
                best_iou = val
        if best >= 0:
            taken[best] = 1
            o[d] = best
    return out
