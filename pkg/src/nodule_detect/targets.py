"""Anchors, overlap, ground-truth labelling, box codec, minibatch sampling and NMS.

All anchor-indexed arrays share one flat layout: pyramid levels from
coarsest to finest, then row ``y``, column ``x`` and ratio index inside
each level.  :func:`anchor_index` and :func:`anchor_position` convert
between the flat index and the ``(level, y, x, a)`` tuple.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .boxes import Box, as_box_array, to_center_form
from .errors import EmptyMinibatchError, InvalidArgumentError

DEFAULT_STRIDES = (32, 16, 8, 4, 2)
DEFAULT_SCALES = (128.0, 64.0, 32.0, 16.0, 8.0)
DEFAULT_RATIOS = (0.5, 1.0, 2.0)

RPN_POSITIVE_IOU = 0.7
RPN_NEGATIVE_IOU = 0.3
ROI_FOREGROUND_IOU = 0.5
ROI_BACKGROUND_IOU = 0.3

POSITIVE, NEGATIVE, NEUTRAL = 1, 0, -1
FOREGROUND, BACKGROUND, DISCARD = 1, 0, -1


@dataclass
class AnchorSet:
    boxes: np.ndarray          # (A, 4)
    level_of: np.ndarray       # (A,) level index per anchor
    scales_px: tuple
    ratios: tuple
    strides: tuple
    grid_sizes: tuple          # ((H_l, W_l), ...)

    def __len__(self):
        return len(self.boxes)

    @property
    def level_offsets(self):
        counts = [h * w * len(self.ratios) for h, w in self.grid_sizes]
        return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)


@dataclass
class RpnLabels:
    cls: np.ndarray            # (A,) int8 in {1, 0, -1}
    reg_targets: np.ndarray    # (A, 4); rows with cls != 1 are zero
    matched_gt: np.ndarray     # (A,) argmax-IoU gt index, -1 without gts


@dataclass
class ProposalLabels:
    cls: np.ndarray            # (R,) int8 in {1, 0, -1}
    reg_targets: np.ndarray    # (R, 4); rows with cls != 1 are zero
    max_iou: np.ndarray


def generate_anchors(image_size, strides=DEFAULT_STRIDES, scales_px=DEFAULT_SCALES,
                     ratios=DEFAULT_RATIOS):
    """Tile one scale and ``len(ratios)`` aspect ratios over every cell of every level.

    ``image_size`` is an int or ``(height, width)``.  Anchors are not clipped.
    """
    if np.isscalar(image_size):
        height = width = int(image_size)
    else:
        height, width = (int(v) for v in image_size)
    if len(strides) != len(scales_px):
        raise InvalidArgumentError("one anchor scale per pyramid level is required")
    ratios = tuple(float(r) for r in ratios)
    sqrt_r = np.sqrt(np.asarray(ratios))
    boxes, levels, grids = [], [], []
    for lvl, (stride, scale) in enumerate(zip(strides, scales_px)):
        gh, gw = height // stride, width // stride
        grids.append((gh, gw))
        cy, cx = np.meshgrid((np.arange(gh) + 0.5) * stride,
                             (np.arange(gw) + 0.5) * stride, indexing="ij")
        half_w = 0.5 * scale * sqrt_r
        half_h = 0.5 * scale / sqrt_r
        # (gh, gw, n_ratios, 4) keeps (y, x, a) row-major
        b = np.stack([
            cx[..., None] - half_w, cy[..., None] - half_h,
            cx[..., None] + half_w, cy[..., None] + half_h,
        ], axis=-1)
        boxes.append(b.reshape(-1, 4))
        levels.append(np.full(gh * gw * len(ratios), lvl, dtype=np.int64))
    return AnchorSet(
        boxes=np.concatenate(boxes) if boxes else np.zeros((0, 4)),
        level_of=np.concatenate(levels) if levels else np.zeros(0, dtype=np.int64),
        scales_px=tuple(float(s) for s in scales_px),
        ratios=ratios,
        strides=tuple(int(s) for s in strides),
        grid_sizes=tuple(grids),
    )


def anchor_index(anchors, level, y, x, a):
    _, gw = anchors.grid_sizes[level]
    n_a = len(anchors.ratios)
    return int(anchors.level_offsets[level] + (y * gw + x) * n_a + a)


def anchor_position(anchors, index):
    offsets = anchors.level_offsets
    level = int(np.searchsorted(offsets, index, side="right") - 1)
    rem = index - offsets[level]
    n_a = len(anchors.ratios)
    _, gw = anchors.grid_sizes[level]
    cell, a = divmod(int(rem), n_a)
    y, x = divmod(cell, gw)
    return level, y, x, a


def iou(a, b):
    """IoU of two boxes; 0 when they do not overlap."""
    return float(kernels.iou_matrix(as_box_array(a), as_box_array(b))[0, 0])


def iou_matrix(a, b):
    return kernels.iou_matrix(as_box_array(a), as_box_array(b))


def encode_box(ref, gt):
    """R-CNN deltas ``(tx, ty, tw, th)`` taking ``ref`` onto ``gt``.  Vectorised over rows."""
    px, py, pw, ph = to_center_form(ref)
    gx, gy, gw, gh = to_center_form(gt)
    if np.any(pw <= 0) or np.any(ph <= 0):
        raise InvalidArgumentError("reference box must have positive width and height")
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise InvalidArgumentError("target box must have positive width and height")
    t = np.stack([(gx - px) / pw, (gy - py) / ph, np.log(gw / pw), np.log(gh / ph)], axis=1)
    return t[0] if isinstance(ref, Box) and isinstance(gt, Box) else t


def decode_box(ref, t):
    """Inverse of :func:`encode_box`; no clipping."""
    px, py, pw, ph = to_center_form(ref)
    t = np.asarray(t, dtype=np.float64).reshape(-1, 4)
    cx = px + t[:, 0] * pw
    cy = py + t[:, 1] * ph
    w = pw * np.exp(t[:, 2])
    h = ph * np.exp(t[:, 3])
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    return Box.from_array(out[0]) if isinstance(ref, Box) else out


def assign_rpn_labels(anchors, gts):
    """Threshold anchors by their best IoU with any ground truth.

    Best IoU above 0.7 is positive, below 0.3 negative, anything in the
    closed band [0.3, 0.7] neutral.  Each gt's single best anchor (lowest
    index on ties) is also forced positive, provided the overlap is nonzero.
    """
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else as_box_array(anchors)
    gts = as_box_array(gts)
    n = len(boxes)
    cls = np.full(n, NEGATIVE, dtype=np.int8)
    reg = np.zeros((n, 4), dtype=np.float64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gts) == 0:
        return RpnLabels(cls, reg, matched)
    ious = kernels.iou_matrix(boxes, gts)
    matched = ious.argmax(axis=1)
    best = ious[np.arange(n), matched]
    cls[best >= RPN_NEGATIVE_IOU] = NEUTRAL
    cls[best > RPN_POSITIVE_IOU] = POSITIVE
    gt_best = ious.argmax(axis=0)
    hit = ious[gt_best, np.arange(len(gts))] > 0
    cls[gt_best[hit]] = POSITIVE
    pos = np.flatnonzero(cls == POSITIVE)
    if len(pos):
        reg[pos] = encode_box(boxes[pos], gts[matched[pos]])
    return RpnLabels(cls, reg, matched)


def assign_classifier_labels(proposals, gts):
    """Foreground above 0.5 IoU, background in [0.3, 0.5], discarded below 0.3."""
    props = as_box_array(proposals)
    gts = as_box_array(gts)
    n = len(props)
    cls = np.full(n, DISCARD, dtype=np.int8)
    reg = np.zeros((n, 4), dtype=np.float64)
    if len(gts) == 0 or n == 0:
        return ProposalLabels(cls, reg, np.zeros(n))
    ious = kernels.iou_matrix(props, gts)
    matched = ious.argmax(axis=1)
    best = ious[np.arange(n), matched]
    cls[best >= ROI_BACKGROUND_IOU] = BACKGROUND
    cls[best > ROI_FOREGROUND_IOU] = FOREGROUND
    fg = np.flatnonzero(cls == FOREGROUND)
    if len(fg):
        reg[fg] = encode_box(props[fg], gts[matched[fg]])
    return ProposalLabels(cls, reg, best)


def sample_rpn_minibatch(labels, n=256, pos_fraction=0.5, rng=None):
    """Pick up to ``n * pos_fraction`` positives, fill the rest with negatives.

    Works for any label vector using 1 / 0 / -1, so it also samples
    classifier proposals.  Returns sorted indices.
    """
    if n <= 0:
        raise InvalidArgumentError("minibatch size must be positive")
    rng = np.random.default_rng(rng)
    cls = labels.cls if hasattr(labels, "cls") else np.asarray(labels)
    pos = np.flatnonzero(cls == 1)
    neg = np.flatnonzero(cls == 0)
    if len(pos) == 0 and len(neg) == 0:
        raise EmptyMinibatchError("no positive or negative samples to draw from")
    n_pos = min(len(pos), int(n * pos_fraction))
    n_neg = min(len(neg), n - n_pos)
    picked = np.concatenate([
        rng.choice(pos, size=n_pos, replace=False),
        rng.choice(neg, size=n_neg, replace=False),
    ]).astype(np.int64)
    return np.sort(picked)


def nms(boxes, scores, iou_thr):
    """Greedy suppression in descending score order; equal scores keep the lower index first."""
    boxes = as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if len(boxes) != len(scores):
        raise InvalidArgumentError("boxes and scores differ in length")
    return kernels.nms(boxes, scores, float(iou_thr))
