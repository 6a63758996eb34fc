# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled box kernels: pairwise IoU, greedy NMS and greedy detection matching."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fmax, fmin

cnp.import_array()


cdef inline double _iou(const double[:, ::1] a, Py_ssize_t i,
                        const double[:, ::1] b, Py_ssize_t j, double area_a, double area_b) noexcept nogil:
    cdef double iw = fmin(a[i, 2], b[j, 2]) - fmax(a[i, 0], b[j, 0])
    cdef double ih = fmin(a[i, 3], b[j, 3]) - fmax(a[i, 1], b[j, 1])
    if iw <= 0 or ih <= 0:
        return 0.0
    cdef double inter = iw * ih
    cdef double union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(a, b):
    cdef const double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    cdef const double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double[::1] area_b = np.empty(m, dtype=np.float64)
    cdef double area_a
    with nogil:
        for j in range(m):
            area_b[j] = (bv[j, 2] - bv[j, 0]) * (bv[j, 3] - bv[j, 1])
        for i in range(n):
            area_a = (av[i, 2] - av[i, 0]) * (av[i, 3] - av[i, 1])
            for j in range(m):
                ov[i, j] = _iou(av, i, bv, j, area_a, area_b[j])
    return out


def nms(boxes, scores, double iou_thr):
    cdef const double[:, ::1] bv = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.ascontiguousarray(scores, dtype=np.float64).ravel()
    cdef cnp.int64_t[::1] order = np.argsort(-scores, kind="stable").astype(np.int64)
    cdef Py_ssize_t n = bv.shape[0], oi, oj, i, j, n_keep = 0
    cdef double[::1] areas = np.empty(n, dtype=np.float64)
    cdef cnp.uint8_t[::1] suppressed = np.zeros(n, dtype=np.uint8)
    keep = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] kv = keep
    with nogil:
        for i in range(n):
            areas[i] = (bv[i, 2] - bv[i, 0]) * (bv[i, 3] - bv[i, 1])
        for oi in range(n):
            i = order[oi]
            if suppressed[i]:
                continue
            kv[n_keep] = i
            n_keep += 1
            for oj in range(oi + 1, n):
                j = order[oj]
                if not suppressed[j] and _iou(bv, i, bv, j, areas[i], areas[j]) > iou_thr:
                    suppressed[j] = 1
    return keep[:n_keep]


def greedy_match(dets, gts, double iou_thr):
    cdef const double[:, ::1] dv = np.ascontiguousarray(dets, dtype=np.float64).reshape(-1, 4)
    cdef const double[:, ::1] gv = np.ascontiguousarray(gts, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = dv.shape[0], m = gv.shape[0], d, g, best
    is_tp = np.zeros(n, dtype=bool)
    gt_hit = np.zeros(m, dtype=bool)
    det_to_gt = np.full(n, -1, dtype=np.int64)
    cdef cnp.uint8_t[::1] tpv = is_tp.view(np.uint8)
    cdef cnp.uint8_t[::1] hitv = gt_hit.view(np.uint8)
    cdef cnp.int64_t[::1] d2g = det_to_gt
    cdef double[::1] area_g = np.empty(m, dtype=np.float64)
    cdef double area_d, best_iou, v
    with nogil:
        for g in range(m):
            area_g[g] = (gv[g, 2] - gv[g, 0]) * (gv[g, 3] - gv[g, 1])
        for d in range(n):
            area_d = (dv[d, 2] - dv[d, 0]) * (dv[d, 3] - dv[d, 1])
            best = -1
            best_iou = -1.0
            for g in range(m):
                if hitv[g]:
                    continue
                v = _iou(dv, d, gv, g, area_d, area_g[g])
                if v > best_iou:
                    best_iou = v
                    best = g
            if best >= 0 and best_iou > iou_thr:
                tpv[d] = 1
                hitv[best] = 1
                d2g[d] = best
    return is_tp, gt_hit, det_to_gt
