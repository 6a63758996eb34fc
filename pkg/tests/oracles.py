"""Brute-force reference implementations used as test oracles.

Nothing here imports the package's computational code; everything is
plain Python loops so it can't share a bug with the vectorized paths.
"""

import math


def box_iou(a, b):
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def raster_iou(a, b, res=1.0):
    """IoU by counting covered pixel centers on a grid of pitch ``res``."""
    x0 = math.floor(min(a[0], b[0]))
    y0 = math.floor(min(a[1], b[1]))
    x1 = math.ceil(max(a[2], b[2]))
    y1 = math.ceil(max(a[3], b[3]))
    n_a = n_b = n_ab = 0
    y = y0 + res / 2
    while y < y1:
        x = x0 + res / 2
        while x < x1:
            ina = a[0] <= x < a[2] and a[1] <= y < a[3]
            inb = b[0] <= x < b[2] and b[1] <= y < b[3]
            n_a += ina
            n_b += inb
            n_ab += ina and inb
            x += res
        y += res
    union = n_a + n_b - n_ab
    return n_ab / union if union else 0.0


def nearest_rank(values, q):
    s = sorted(values)
    k = math.ceil(q / 100 * len(s))
    return s[max(k, 1) - 1]


def greedy_match(dets, scores, gts, thr=0.5):
    """Per-detection TP flags (input order) via explicit descending-confidence loop."""
    order = sorted(range(len(dets)), key=lambda i: (-scores[i], i))
    used = [False] * len(gts)
    tp = [False] * len(dets)
    for i in order:
        best, best_g = -1.0, -1
        for g, gt in enumerate(gts):
            if used[g]:
                continue
            v = box_iou(dets[i], gt)
            if v > best:
                best, best_g = v, g
        if best_g >= 0 and best > thr:
            used[best_g] = True
            tp[i] = True
    return tp, used


def froc_points(per_scan, thr=0.5):
    """Operating points by re-running matching from scratch at every threshold."""
    all_scores = sorted({s for dets, scores, gts in per_scan for s in scores}, reverse=True)
    n_gt = sum(len(gts) for _, _, gts in per_scan)
    points = [(0.0, 0.0)]
    for t in all_scores:
        fp = tp = 0
        for dets, scores, gts in per_scan:
            keep = [i for i in range(len(dets)) if scores[i] >= t]
            flags, _ = greedy_match([dets[i] for i in keep], [scores[i] for i in keep], gts, thr)
            tp += sum(flags)
            fp += len(flags) - sum(flags)
        points.append((fp / len(per_scan), tp / n_gt))
    return [math.inf] + all_scores, points


def rpn_labels(anchors, gts, hi=0.7, lo=0.3):
    n = len(anchors)
    cls = [0] * n
    if not gts:
        return cls
    best = []
    for a in anchors:
        best.append(max(box_iou(a, g) for g in gts))
    for i, m in enumerate(best):
        if m > hi:
            cls[i] = 1
        elif m < lo:
            cls[i] = 0
        else:
            cls[i] = -1
    for g in gts:
        top, top_i = 0.0, -1
        for i, a in enumerate(anchors):
            v = box_iou(a, g)
            if v > top:
                top, top_i = v, i
        if top_i >= 0:
            cls[top_i] = 1
    return cls


def classifier_labels(props, gts):
    out = []
    for p in props:
        m = max((box_iou(p, g) for g in gts), default=0.0)
        out.append(1 if m > 0.5 else (0 if m >= 0.3 else -1))
    return out


def nms(boxes, scores, thr):
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    alive = [True] * len(boxes)
    keep = []
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        keep.append(i)
        for j in order[pos + 1:]:
            if alive[j] and box_iou(boxes[i], boxes[j]) > thr:
                alive[j] = False
    return keep


def log_loss_scalar(rpn_logits, rpn_deltas, rpn_labels, rpn_targets,
                    head_logits, head_deltas, head_labels, head_targets, lam=1.0):
    """Multi-task loss with explicit loops, float math only."""

    def sl1(x):
        return 0.5 * x * x if abs(x) < 1 else abs(x) - 0.5

    total = 0.0
    # binary stage
    n = len(rpn_labels)
    cls = 0.0
    for z, y in zip(rpn_logits, rpn_labels):
        p = 1.0 / (1.0 + math.exp(-z))
        cls -= math.log(p) if y == 1 else math.log(1.0 - p)
    cls /= n
    pos = [i for i, y in enumerate(rpn_labels) if y == 1]
    reg = sum(sl1(rpn_deltas[i][c] - rpn_targets[i][c]) for i in pos for c in range(4)) / len(pos) if pos else 0.0
    total += cls + lam * reg
    # softmax stage
    n = len(head_labels)
    cls = 0.0
    for row, y in zip(head_logits, head_labels):
        mx = max(row)
        lse = mx + math.log(sum(math.exp(v - mx) for v in row))
        cls -= row[y] - lse
    cls /= n
    pos = [i for i, y in enumerate(head_labels) if y == 1]
    reg = sum(sl1(head_deltas[i][c] - head_targets[i][c]) for i in pos for c in range(4)) / len(pos) if pos else 0.0
    total += cls + lam * reg
    return total


def central_difference(f, x, h=1e-3):
    return (f(x + h) - f(x - h)) / (2 * h)
