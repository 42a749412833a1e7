# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot loops in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log2, INFINITY

cnp.import_array()


def build_histogram(const unsigned char[:, ::1] binned, const cnp.intp_t[::1] rows,
                    const double[::1] g, const double[::1] h,
                    const cnp.intp_t[::1] features, int n_bins):
    cdef Py_ssize_t n_feat = features.shape[0]
    cdef Py_ssize_t n_rows = rows.shape[0]
    out_arr = np.zeros((n_feat, n_bins, 3), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[::1] gr = np.empty(n_rows, dtype=np.float64)
    cdef double[::1] hr = np.empty(n_rows, dtype=np.float64)
    cdef Py_ssize_t i, j, r
    cdef unsigned char b
    cdef const unsigned char[::1] col
    for i in range(n_rows):
        gr[i] = g[rows[i]]
        hr[i] = h[rows[i]]
    with nogil:
        for j in range(n_feat):
            col = binned[features[j]]
            for i in range(n_rows):
                b = col[rows[i]]
                out[j, b, 0] += gr[i]
                out[j, b, 1] += hr[i]
                out[j, b, 2] += 1.0
    return out_arr


def find_best_split(const double[:, :, ::1] hist, const cnp.intp_t[::1] n_bins,
                    double l2, double min_samples_leaf):
    # same arithmetic order as the numpy version, so gains match bit for bit
    cdef Py_ssize_t n_feat = hist.shape[0]
    cdef Py_ssize_t width = hist.shape[1]
    cdef Py_ssize_t j, t, best_f = -1, best_t = -1
    cdef double best = -INFINITY
    cdef double G, H, C, gl, hl, cl, gr, hr, cr, parent, gain
    if n_feat == 0 or width < 2:
        return -1, -1, best
    with nogil:
        for j in range(n_feat):
            G = 0.0
            H = 0.0
            C = 0.0
            for t in range(width):
                G += hist[j, t, 0]
                H += hist[j, t, 1]
                C += hist[j, t, 2]
            parent = G * G / (H + l2)
            gl = 0.0
            hl = 0.0
            cl = 0.0
            for t in range(n_bins[j] - 1):
                gl += hist[j, t, 0]
                hl += hist[j, t, 1]
                cl += hist[j, t, 2]
                if cl < min_samples_leaf:
                    continue
                cr = C - cl
                if cr < min_samples_leaf:
                    break
                gr = G - gl
                hr = H - hl
                gain = gl * gl / (hl + l2) + gr * gr / (hr + l2) - parent
                if gain > best:
                    best = gain
                    best_f = j
                    best_t = t
    return best_f, best_t, best


def predict_raw(const cnp.intp_t[::1] feature, const double[::1] threshold_value,
                const cnp.intp_t[::1] left, const cnp.intp_t[::1] right,
                const double[::1] value, const double[:, :] X):
    cdef Py_ssize_t n = X.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, node
    with nogil:
        for i in range(n):
            node = 0
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold_value[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[i] = value[node]
    return out_arr


def predict_binned(const cnp.intp_t[::1] feature, const cnp.intp_t[::1] threshold_bin,
                   const cnp.intp_t[::1] left, const cnp.intp_t[::1] right,
                   const double[::1] value, const unsigned char[:, ::1] binned):
    cdef Py_ssize_t n = binned.shape[1]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, node
    with nogil:
        for i in range(n):
            node = 0
            while feature[node] >= 0:
                if binned[feature[node], i] <= threshold_bin[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[i] = value[node]
    return out_arr


def byte_entropy_counts(data, Py_ssize_t window, Py_ssize_t stride):
    cdef const unsigned char[::1] buf = memoryview(bytes(data)).cast("B")
    out_arr = np.zeros((16, 16), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    cdef Py_ssize_t n = buf.shape[0]
    cdef Py_ssize_t start = 0, end, i, k, hbin
    cdef cnp.int64_t counts[256]
    cdef cnp.int64_t coarse[16]
    cdef double p, ent, size
    with nogil:
        while start < n:
            end = start + window
            if end > n:
                end = n
            for k in range(256):
                counts[k] = 0
            for k in range(16):
                coarse[k] = 0
            for i in range(start, end):
                counts[buf[i]] += 1
                coarse[buf[i] >> 4] += 1
            size = <double>(end - start)
            ent = 0.0
            for k in range(256):
                if counts[k] > 0:
                    p = counts[k] / size
                    ent -= p * log2(p)
            hbin = <Py_ssize_t>(ent * 2)
            if hbin > 15:
                hbin = 15
            if hbin < 0:
                hbin = 0
            for k in range(16):
                out[hbin, k] += coarse[k]
            if end >= n:
                break
            start += stride
    return out_arr
