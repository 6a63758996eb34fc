"""Region proposal head, ROI Align pooling and the second-stage classifier."""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .boxes import Box, as_box_array
from .errors import DegenerateRoiError, InvalidArgumentError

N_RATIOS = 3


@dataclass
class RpnOutput:
    objectness: torch.Tensor   # (N, A) logits
    deltas: torch.Tensor       # (N, A, 4)

    def __len__(self):
        return self.objectness.shape[-1]


@dataclass
class RoiFeature:
    grid: torch.Tensor         # (C, P, P)
    source_level: int
    source_box: Box


@dataclass
class ClassifierOutput:
    logits: torch.Tensor       # (R, 2); column 0 background, 1 nodule
    deltas: torch.Tensor       # (R, 4)

    @property
    def class_scores(self):
        return torch.softmax(self.logits, dim=-1)


class RPNHead(nn.Module):
    """3x3 conv + ReLU shared across levels, then 1x1 objectness and delta convs.

    Output is flattened per level in ``(y, x, anchor)`` row-major order and
    the levels are concatenated coarsest first.
    """

    def __init__(self, channels, n_anchors=N_RATIOS):
        super().__init__()
        self.channels = channels
        self.n_anchors = n_anchors
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.ReLU()
        self.cls = nn.Conv2d(channels, n_anchors, 1)
        self.reg = nn.Conv2d(channels, 4 * n_anchors, 1)

    def forward(self, pyramid):
        levels = pyramid.levels if hasattr(pyramid, "levels") else pyramid
        objectness, deltas = [], []
        for feat in levels:
            if feat.shape[1] != self.channels:
                raise InvalidArgumentError(
                    f"pyramid level has {feat.shape[1]} channels, head expects {self.channels}")
            h = self.act(self.conv(feat))
            n = feat.shape[0]
            objectness.append(self.cls(h).permute(0, 2, 3, 1).reshape(n, -1))
            deltas.append(self.reg(h).permute(0, 2, 3, 1).reshape(n, -1, 4))
        return RpnOutput(torch.cat(objectness, dim=1), torch.cat(deltas, dim=1))


def assign_roi_level(box, anchor_scales):
    """Index of the level whose anchor scale is nearest to ``sqrt(area)``; ties go to the coarser level.

    ``anchor_scales`` is ordered coarsest first (a FeaturePyramid is accepted too).
    ``box`` may be a single box or an ``(R, 4)`` array.
    """
    scales = np.asarray(getattr(anchor_scales, "anchor_scale_px", anchor_scales), dtype=np.float64)
    single = isinstance(box, Box) or np.ndim(box) == 1
    b = as_box_array(box)
    side = np.sqrt(np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None))
    dist = np.abs(side[:, None] - scales[None, :])
    # argmin returns the first minimum, which is the coarser level
    levels = dist.argmin(axis=1)
    return int(levels[0]) if single else levels


def _bilinear_gather(feature, ys, xs):
    """Sample ``feature`` (C, H, W) at continuous index coordinates; outside ``[-1, size]`` gives 0."""
    c, h, w = feature.shape
    valid = (ys >= -1.0) & (ys <= h) & (xs >= -1.0) & (xs <= w)
    y = ys.clamp(0, h - 1)
    x = xs.clamp(0, w - 1)
    y0 = y.floor().long().clamp(max=h - 1)
    x0 = x.floor().long().clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    ly = (y - y0.to(y.dtype)).to(feature.dtype)
    lx = (x - x0.to(x.dtype)).to(feature.dtype)
    hy, hx = 1 - ly, 1 - lx
    flat = feature.reshape(c, -1)

    def at(yi, xi):
        return flat[:, (yi * w + xi).reshape(-1)].reshape(c, *yi.shape)

    out = (hy * hx) * at(y0, x0) + (hy * lx) * at(y0, x1) + (ly * hx) * at(y1, x0) + (ly * lx) * at(y1, x1)
    return out * valid.to(feature.dtype)


def roi_align(feature, boxes, stride, output_size=7, sampling_ratio=2):
    """Pool boxes from one feature map (C, H, W) into ``(R, C, P, P)`` grids.

    Boxes are in image pixels and are divided by ``stride`` without
    rounding.  Feature cell ``i`` is centred at continuous coordinate
    ``i + 0.5``.  Each bin averages ``sampling_ratio**2`` bilinear samples
    on a regular grid.
    """
    if output_size < 1:
        raise InvalidArgumentError("output size must be >= 1")
    b = torch.as_tensor(as_box_array(boxes), dtype=torch.float64) / float(stride)
    span = torch.minimum(b[:, 2] - b[:, 0], b[:, 3] - b[:, 1])
    if len(b) and bool((span < 1e-6).any()):
        raise DegenerateRoiError("box collapses below 1e-6 feature pixels")
    p, s = output_size, sampling_ratio
    # sample offsets inside the box, as fractions of its size
    frac = (torch.arange(p, dtype=torch.float64)[:, None]
            + (torch.arange(s, dtype=torch.float64)[None, :] + 0.5) / s).reshape(-1) / p
    xs = b[:, 0:1] + frac[None, :] * (b[:, 2:3] - b[:, 0:1]) - 0.5   # (R, P*S)
    ys = b[:, 1:2] + frac[None, :] * (b[:, 3:4] - b[:, 1:2]) - 0.5
    r = len(b)
    grid_y = ys[:, :, None].expand(r, p * s, p * s)
    grid_x = xs[:, None, :].expand(r, p * s, p * s)
    vals = _bilinear_gather(feature, grid_y, grid_x)               # (C, R, P*S, P*S)
    c = feature.shape[0]
    vals = vals.reshape(c, r, p, s, p, s).mean(dim=(3, 5))
    return vals.permute(1, 0, 2, 3).contiguous()


def roi_align_single(feature, box, stride, output_size=7, sampling_ratio=2, level=-1):
    box = box if isinstance(box, Box) else Box.from_array(box)
    grid = roi_align(feature, box.as_array()[None], stride, output_size, sampling_ratio)[0]
    return RoiFeature(grid, level, box)


def pool_pyramid(pyramid, boxes, batch_index, output_size=7, sampling_ratio=2):
    """ROI Align every box on the level chosen by :func:`assign_roi_level`.

    ``pyramid.levels`` are batched ``(N, C, H, W)``; ``batch_index[i]``
    names the image box ``i`` belongs to.  Returns ``(R, C, P, P)`` in input order.
    """
    boxes = as_box_array(boxes)
    batch_index = np.asarray(batch_index, dtype=np.int64)
    c = pyramid.levels[0].shape[1]
    ref = pyramid.levels[0]
    out = ref.new_zeros((len(boxes), c, output_size, output_size))
    if len(boxes) == 0:
        return out, np.zeros(0, dtype=np.int64)
    levels = assign_roi_level(boxes, pyramid.anchor_scale_px)
    chunks, order = [], []
    for lvl in np.unique(levels):
        for n in np.unique(batch_index):
            sel = np.flatnonzero((levels == lvl) & (batch_index == n))
            if len(sel) == 0:
                continue
            chunks.append(roi_align(pyramid.levels[lvl][n], boxes[sel], pyramid.strides[lvl],
                                    output_size, sampling_ratio))
            order.append(sel)
    order = torch.as_tensor(np.concatenate(order))
    out = out.index_put((order,), torch.cat(chunks))
    return out, levels


class Classifier(nn.Module):
    """Two hidden fully connected layers, then a class head and a box-delta head."""

    def __init__(self, in_channels, pool_size=7, hidden=1024, dropout=0.5, n_classes=2):
        super().__init__()
        self.in_features = in_channels * pool_size * pool_size
        self.fc1 = nn.Linear(self.in_features, hidden)
        self.act1 = nn.ReLU()
        self.drop1 = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden, hidden)
        self.act2 = nn.ReLU()
        self.drop2 = nn.Dropout(dropout)
        self.cls = nn.Linear(hidden, n_classes)
        self.reg = nn.Linear(hidden, 4 * (n_classes - 1))

    def forward(self, rois):
        if isinstance(rois, (list, tuple)):
            grids = [r.grid if isinstance(r, RoiFeature) else r for r in rois]
            if len({tuple(g.shape) for g in grids}) > 1:
                raise InvalidArgumentError("ROI features differ in shape")
            rois = torch.stack(grids) if grids else torch.zeros(0, self.in_features)
        x = rois.reshape(rois.shape[0], -1)
        if x.shape[1] != self.in_features:
            raise InvalidArgumentError(f"ROI feature has {x.shape[1]} values, expected {self.in_features}")
        h = self.drop1(self.act1(self.fc1(x)))
        h = self.drop2(self.act2(self.fc2(h)))
        return ClassifierOutput(self.cls(h), self.reg(h))
