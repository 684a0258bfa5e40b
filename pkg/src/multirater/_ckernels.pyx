# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the per-pixel kernels in :mod:`multirater._pykernels`.

Every function here has the same signature and bit-identical output as its
pure-Python counterpart; :mod:`multirater.kernels` picks one at import.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def disc_offsets(int radius):
    cdef list out = []
    cdef int dy, dx
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy * dy + dx * dx <= radius * radius:
                out.append((dy, dx))
    return out


cdef cnp.ndarray _morph(cnp.ndarray mask_in, int radius, bint erode):
    cdef cnp.uint8_t[:, ::1] m = np.ascontiguousarray(mask_in, dtype=np.uint8)
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1]
    out_arr = np.zeros((h, w), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    offs = np.asarray(disc_offsets(radius), dtype=np.intp).reshape(-1, 2)
    cdef Py_ssize_t[:, ::1] o = offs
    cdef Py_ssize_t n = o.shape[0]
    cdef Py_ssize_t i, j, k, y, x
    cdef cnp.uint8_t hit
    for i in range(h):
        for j in range(w):
            # erosion: any in-bounds background neighbour clears the pixel;
            # dilation: any in-bounds foreground neighbour sets it
            hit = 0
            for k in range(n):
                y = i + o[k, 0]
                x = j + o[k, 1]
                if y < 0 or y >= h or x < 0 or x >= w:
                    continue
                if erode:
                    if m[y, x] == 0:
                        hit = 1
                        break
                elif m[y, x] != 0:
                    hit = 1
                    break
            if erode:
                out[i, j] = 0 if hit else 1
            else:
                out[i, j] = hit
    return out_arr


def erode(mask, int radius):
    return _morph(np.asarray(mask), radius, True)


def dilate(mask, int radius):
    return _morph(np.asarray(mask), radius, False)


cdef extern from *:
    int __builtin_popcountll(unsigned long long) nogil


def _pack_rows(x):
    # one bit per pixel, rows zero-padded to whole 64-bit words
    bits = np.packbits(np.asarray(x) != 0, axis=1)
    pad = (-bits.shape[1]) % 8
    if pad:
        bits = np.pad(bits, ((0, 0), (0, pad)))
    return np.ascontiguousarray(bits).view(np.uint64)


def pairwise_iou_distance(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError("mask sets have different pixel counts")
    cdef cnp.uint64_t[:, ::1] A = _pack_rows(a)
    cdef cnp.uint64_t[:, ::1] B = _pack_rows(b)
    cdef Py_ssize_t na = A.shape[0], nb = B.shape[0], words = A.shape[1]
    out_arr = np.empty((na, nb), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef long[::1] ca = np.empty(na, dtype=np.int_)
    cdef long[::1] cb = np.empty(nb, dtype=np.int_)
    cdef Py_ssize_t i, j, k
    cdef long inter, union_
    with nogil:
        for i in range(na):
            ca[i] = 0
            for k in range(words):
                ca[i] += __builtin_popcountll(A[i, k])
        for j in range(nb):
            cb[j] = 0
            for k in range(words):
                cb[j] += __builtin_popcountll(B[j, k])
        for i in range(na):
            for j in range(nb):
                inter = 0
                for k in range(words):
                    inter += __builtin_popcountll(A[i, k] & B[j, k])
                union_ = ca[i] + cb[j] - inter
                if union_ == 0:
                    out[i, j] = 0.0
                else:
                    out[i, j] = 1.0 - (<double>inter) / (<double>union_)
    return out_arr


def level_index(q, int levels):
    cdef double[::1] v = np.ascontiguousarray(q, dtype=np.float64).ravel()
    cdef Py_ssize_t n = v.shape[0], i
    out_arr = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] out = out_arr
    cdef double L = levels
    cdef Py_ssize_t lv
    for i in range(n):
        lv = <Py_ssize_t>floor(v[i] * L)
        if lv > levels - 1:
            lv = levels - 1
        if lv < 0:
            lv = 0
        # the product can round across a band edge; settle on the literal comparisons
        while lv < levels - 1 and (lv + 1) / L <= v[i]:
            lv += 1
        while lv > 0 and lv / L > v[i]:
            lv -= 1
        out[i] = lv
    return out_arr.reshape(np.shape(q))


def staged_dice(pred, gt, int levels):
    cdef Py_ssize_t[::1] lp = np.ascontiguousarray(level_index(pred, levels)).ravel()
    cdef Py_ssize_t[::1] lg = np.ascontiguousarray(level_index(gt, levels)).ravel()
    cdef Py_ssize_t n = lp.shape[0], i, l
    inter_arr = np.zeros(levels, dtype=np.int64)
    sp_arr = np.zeros(levels, dtype=np.int64)
    sg_arr = np.zeros(levels, dtype=np.int64)
    cdef cnp.int64_t[::1] inter = inter_arr
    cdef cnp.int64_t[::1] sp = sp_arr
    cdef cnp.int64_t[::1] sg = sg_arr
    for i in range(n):
        sp[lp[i]] += 1
        sg[lg[i]] += 1
        if lp[i] == lg[i]:
            inter[lp[i]] += 1
    out_arr = np.empty(levels, dtype=np.float64)
    cdef double[::1] out = out_arr
    for l in range(levels):
        if sp[l] + sg[l] == 0:
            out[l] = 1.0
        else:
            out[l] = 2.0 * inter[l] / (<double>(sp[l] + sg[l]))
    return out_arr
