# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled RotatE distance kernels and filtered rank counting."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, sin, cos

cnp.import_array()


def rotate_distance(const double[:, ::1] ent, const double[:, ::1] phase,
                    const long long[::1] heads, const long long[::1] rels,
                    const long long[:, ::1] cands):
    cdef Py_ssize_t B = cands.shape[0], K = cands.shape[1]
    cdef Py_ssize_t half = ent.shape[1] // 2
    cdef Py_ssize_t b, k, j, h, t, r
    cdef double c, s, hre, him, dre, dim, acc
    out_arr = np.empty((B, K), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] hr = np.empty(half, dtype=np.float64)
    cdef double[::1] hi = np.empty(half, dtype=np.float64)
    with nogil:
        for b in range(B):
            h = heads[b]
            r = rels[b]
            for j in range(half):
                c = cos(phase[r, j])
                s = sin(phase[r, j])
                hre = ent[h, j]
                him = ent[h, half + j]
                hr[j] = hre * c - him * s
                hi[j] = hre * s + him * c
            for k in range(K):
                t = cands[b, k]
                acc = 0.0
                for j in range(half):
                    dre = hr[j] - ent[t, j]
                    dim = hi[j] - ent[t, half + j]
                    acc = acc + dre * dre + dim * dim
                out[b, k] = sqrt(acc)
    return out_arr


def rotate_distance_backward(const double[:, ::1] ent, const double[:, ::1] phase,
                             const long long[::1] heads, const long long[::1] rels,
                             const long long[:, ::1] cands, const double[:, ::1] dist,
                             const double[:, ::1] gdist):
    cdef Py_ssize_t B = cands.shape[0], K = cands.shape[1]
    cdef Py_ssize_t half = ent.shape[1] // 2
    cdef Py_ssize_t b, k, j, h, t, r
    cdef double c, s, hre, him, dre, dim, w, ghr, ghi
    g_ent_arr = np.zeros((ent.shape[0], ent.shape[1]), dtype=np.float64)
    g_phase_arr = np.zeros((phase.shape[0], phase.shape[1]), dtype=np.float64)
    cdef double[:, ::1] g_ent = g_ent_arr
    cdef double[:, ::1] g_phase = g_phase_arr
    cdef double[::1] hr = np.empty(half, dtype=np.float64)
    cdef double[::1] hi = np.empty(half, dtype=np.float64)
    cdef double[::1] acc_re = np.empty(half, dtype=np.float64)
    cdef double[::1] acc_im = np.empty(half, dtype=np.float64)
    with nogil:
        for b in range(B):
            h = heads[b]
            r = rels[b]
            for j in range(half):
                c = cos(phase[r, j])
                s = sin(phase[r, j])
                hre = ent[h, j]
                him = ent[h, half + j]
                hr[j] = hre * c - him * s
                hi[j] = hre * s + him * c
                acc_re[j] = 0.0
                acc_im[j] = 0.0
            for k in range(K):
                if dist[b, k] <= 0.0:
                    continue
                w = gdist[b, k] / dist[b, k]
                t = cands[b, k]
                for j in range(half):
                    dre = w * (hr[j] - ent[t, j])
                    dim = w * (hi[j] - ent[t, half + j])
                    g_ent[t, j] -= dre
                    g_ent[t, half + j] -= dim
                    acc_re[j] += dre
                    acc_im[j] += dim
            for j in range(half):
                c = cos(phase[r, j])
                s = sin(phase[r, j])
                ghr = acc_re[j]
                ghi = acc_im[j]
                g_ent[h, j] += ghr * c + ghi * s
                g_ent[h, half + j] += -ghr * s + ghi * c
                g_phase[r, j] += -ghr * hi[j] + ghi * hr[j]
    return g_ent_arr, g_phase_arr


def rank_counts(const double[:, ::1] scores, const long long[::1] targets,
                const unsigned char[:, ::1] filter_mask):
    cdef Py_ssize_t Q = scores.shape[0], N = scores.shape[1]
    cdef Py_ssize_t q, e, tgt
    cdef double ts, v
    cdef long greater, equal
    out_arr = np.empty(Q, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for q in range(Q):
            tgt = targets[q]
            ts = scores[q, tgt]
            greater = 0
            equal = 0
            for e in range(N):
                if e == tgt or filter_mask[q, e]:
                    continue
                v = scores[q, e]
                if v > ts:
                    greater += 1
                elif v == ts:
                    equal += 1
            out[q] = 1.0 + greater + (equal // 2)
    return out_arr
