# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled BART inner-loop kernels (see ``_kernels_py`` for the reference)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

BACKEND = "cython"


def grow_stats(int[::1] leaf_of, int[:, ::1] X, double[::1] r, int node, int var, int cut):
    cdef Py_ssize_t i, n = leaf_of.shape[0]
    cdef long nl = 0, nr = 0
    cdef double sl = 0.0, sr = 0.0
    for i in range(n):
        if leaf_of[i] == node:
            if X[i, var] <= cut:
                nl += 1
                sl += r[i]
            else:
                nr += 1
                sr += r[i]
    return nl, sl, nr, sr


def apply_grow(int[::1] leaf_of, int[:, ::1] X, int node, int var, int cut, int left_id, int right_id):
    cdef Py_ssize_t i, n = leaf_of.shape[0]
    for i in range(n):
        if leaf_of[i] == node:
            leaf_of[i] = left_id if X[i, var] <= cut else right_id


def relabel(int[::1] leaf_of, int a, int b, int target):
    cdef Py_ssize_t i, n = leaf_of.shape[0]
    cdef int v
    for i in range(n):
        v = leaf_of[i]
        if v == a or v == b:
            leaf_of[i] = target


def reroute(int[::1] leaf_of, int[:, ::1] X, int[::1] var, int[::1] cut, int[::1] left,
            int[::1] right, unsigned char[::1] in_sub, int start, int[::1] out):
    cdef Py_ssize_t i, n = leaf_of.shape[0]
    cdef int node, v
    for i in range(n):
        node = leaf_of[i]
        if in_sub[node]:
            node = start
            v = var[node]
            while v >= 0:
                node = left[node] if X[i, v] <= cut[node] else right[node]
                v = var[node]
        out[i] = node


def node_stats(int[::1] leaf_of, double[::1] r, int n_nodes):
    counts = np.zeros(n_nodes, dtype=np.int64)
    sums = np.zeros(n_nodes, dtype=np.float64)
    cdef long long[::1] c = counts
    cdef double[::1] s = sums
    cdef Py_ssize_t i, n = leaf_of.shape[0]
    cdef int k
    for i in range(n):
        k = leaf_of[i]
        c[k] += 1
        s[k] += r[i]
    return counts, sums


def add_leaf_values(double[::1] r, int[::1] leaf_of, double[::1] values, double sign):
    cdef Py_ssize_t i, n = r.shape[0]
    for i in range(n):
        r[i] += sign * values[leaf_of[i]]


def predict_forests(int[::1] var, int[::1] cut, int[::1] left, int[::1] right, double[::1] value,
                    long long[:, ::1] roots, int[:, ::1] X):
    cdef Py_ssize_t D = roots.shape[0], G = roots.shape[1], n = X.shape[0]
    out = np.zeros((D, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t d, g, i
    cdef int node, v
    cdef double acc
    with nogil:
        for d in range(D):
            for i in range(n):
                acc = 0.0
                for g in range(G):
                    node = <int>roots[d, g]
                    v = var[node]
                    while v >= 0:
                        node = left[node] if X[i, v] <= cut[node] else right[node]
                        v = var[node]
                    acc = acc + value[node]
                o[d, i] = acc
    return out


def draw_leaves(int[::1] leaf_of, double[::1] r, double[::1] value, int[::1] leaves,
                double sigma2, double tau2, double[::1] z):
    cdef Py_ssize_t i, j, n = leaf_of.shape[0], L = leaves.shape[0]
    cdef int n_nodes = 0
    for j in range(L):
        if leaves[j] + 1 > n_nodes:
            n_nodes = leaves[j] + 1
    counts = np.zeros(n_nodes, dtype=np.int64)
    sums = np.zeros(n_nodes, dtype=np.float64)
    cdef long long[::1] c = counts
    cdef double[::1] s = sums
    cdef int k
    cdef double prec
    for i in range(n):
        k = leaf_of[i]
        c[k] += 1
        s[k] += r[i]
    for j in range(L):
        k = leaves[j]
        if c[k] == 0:
            return False
        prec = c[k] / sigma2 + 1.0 / tau2
        value[k] = s[k] / sigma2 / prec + z[j] / sqrt(prec)
    for i in range(n):
        r[i] -= value[leaf_of[i]]
    return True
