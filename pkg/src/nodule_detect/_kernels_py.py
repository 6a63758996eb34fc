"""Pure numpy versions of the box kernels.

Used when the compiled extension is unavailable, or when
``NODULE_DETECT_PURE_PYTHON=1`` is set.  Semantics match ``_kernels_cy``
exactly; the test-suite runs both.
"""

import numpy as np


def iou_matrix(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(boxes, scores, iou_thr):
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.ascontiguousarray(scores, dtype=np.float64).ravel()
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0, None)
        inter = iw * ih
        union = areas[i] + areas[rest] - inter
        ovr = np.zeros_like(inter)
        np.divide(inter, union, out=ovr, where=union > 0)
        order = rest[ovr <= iou_thr]
    return np.asarray(keep, dtype=np.int64)


def greedy_match(dets, gts, iou_thr):
    """Match detections, already in priority order, to ground truths.

    Returns ``(is_tp, gt_hit, det_to_gt)``.  Each detection takes the
    highest-IoU still-unmatched gt (lowest index on ties) if that IoU
    exceeds ``iou_thr``.
    """
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    n, m = len(dets), len(gts)
    is_tp = np.zeros(n, dtype=bool)
    gt_hit = np.zeros(m, dtype=bool)
    det_to_gt = np.full(n, -1, dtype=np.int64)
    if n == 0 or m == 0:
        return is_tp, gt_hit, det_to_gt
    ious = iou_matrix(dets, gts)
    for d in range(n):
        row = np.where(gt_hit, -1.0, ious[d])
        g = int(np.argmax(row))
        if row[g] > iou_thr:
            is_tp[d] = True
            gt_hit[g] = True
            det_to_gt[d] = g
    return is_tp, gt_hit, det_to_gt
