# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_fallback`` (identical arithmetic order)."""

import numpy as np
cimport numpy as cnp

from ._fallback import cubic_taps

cnp.import_array()


cdef void _resize_rows(const double[:, ::1] img, const long long[:, ::1] idx,
                       const double[:, ::1] w, double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t r, o
    cdef double p0, v
    for r in range(img.shape[0]):
        for o in range(idx.shape[0]):
            p0 = img[r, idx[o, 1]]
            v = p0 + w[o, 0] * (img[r, idx[o, 0]] - p0)
            v = v + w[o, 2] * (img[r, idx[o, 2]] - p0)
            v = v + w[o, 3] * (img[r, idx[o, 3]] - p0)
            out[r, o] = v


def resize_bicubic(img, int out_h, int out_w):
    cdef double[:, ::1] src = np.ascontiguousarray(img, dtype=np.float64)
    h, w = src.shape[0], src.shape[1]
    idx_x, w_x = cubic_taps(w, out_w)
    idx_y, w_y = cubic_taps(h, out_h)
    cdef long long[:, ::1] ix = np.ascontiguousarray(idx_x, dtype=np.int64)
    cdef long long[:, ::1] iy = np.ascontiguousarray(idx_y, dtype=np.int64)
    cdef double[:, ::1] wx = np.ascontiguousarray(w_x)
    cdef double[:, ::1] wy = np.ascontiguousarray(w_y)
    tmp = np.empty((h, out_w), dtype=np.float64)
    cdef double[:, ::1] tmp_v = tmp
    with nogil:
        _resize_rows(src, ix, wx, tmp_v)
    cdef double[:, ::1] tmp_t = np.ascontiguousarray(tmp.T)
    out_t = np.empty((out_w, out_h), dtype=np.float64)
    cdef double[:, ::1] out_v = out_t
    with nogil:
        _resize_rows(tmp_t, iy, wy, out_v)
    return np.ascontiguousarray(out_t.T)


cdef inline double _iou(const double[:, ::1] a, Py_ssize_t i,
                        const double[:, ::1] b, Py_ssize_t j) noexcept nogil:
    cdef double iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
    cdef double ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
    cdef double inter, union
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1]) + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter
    return inter / union


def nms(boxes, scores, double iou_threshold):
    cdef double[:, ::1] bx = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    order_arr = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable").astype(np.int64)
    cdef long long[::1] order = order_arr
    cdef Py_ssize_t n = order.shape[0]
    sup_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] sup = sup_arr
    keep_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] keep = keep_arr
    cdef Py_ssize_t pos, later, k = 0
    with nogil:
        for pos in range(n):
            if sup[pos]:
                continue
            keep[k] = order[pos]
            k += 1
            for later in range(pos + 1, n):
                if not sup[later] and _iou(bx, order[pos], bx, order[later]) > iou_threshold:
                    sup[later] = 1
    return keep_arr[:k].copy()


def match_detections(pred_boxes, pred_image, gt_boxes, gt_image, double iou_threshold):
    cdef double[:, ::1] pb = np.ascontiguousarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    cdef double[:, ::1] gb = np.ascontiguousarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    cdef long long[::1] pi = np.ascontiguousarray(pred_image, dtype=np.int64)
    cdef long long[::1] gi = np.ascontiguousarray(gt_image, dtype=np.int64)
    cdef Py_ssize_t P = pb.shape[0], G = gb.shape[0], p, g, best
    cdef double v, best_iou
    taken_arr = np.zeros(G, dtype=np.uint8)
    cdef unsigned char[::1] taken = taken_arr
    out_arr = np.full(P, -1, dtype=np.int64)
    cdef long long[::1] out = out_arr
    with nogil:
        for p in range(P):
            best = -1
            best_iou = -1.0
            for g in range(G):
                if taken[g] or gi[g] != pi[p]:
                    continue
                v = _iou(pb, p, gb, g)
                if v >= iou_threshold and v > best_iou:
                    best = g
                    best_iou = v
            if best >= 0:
                taken[best] = 1
                out[p] = best
    return out_arr
