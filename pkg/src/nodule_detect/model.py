"""The full two-stage detector: backbone, RPN, ROI pooling and classifier."""

from dataclasses import dataclass, field, fields

import numpy as np
import torch
from torch import nn

from . import targets as tg
from .backbone import Backbone, BackboneConfig, PYRAMID_STRIDES
from .boxes import clip_boxes, valid_mask
from .errors import InvalidArgumentError
from .heads import Classifier, RPNHead, pool_pyramid


@dataclass
class DetectorConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    image_size: int = 512
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    pool_size: int = 7
    sampling_ratio: int = 2
    hidden: int = 1024
    dropout: float = 0.5
    rpn_batch_size: int = 256
    rpn_positive_fraction: float = 0.5
    roi_batch_size: int = 128
    roi_positive_fraction: float = 0.25
    proposal_nms: float = 0.7
    pre_nms_top_n_train: int = 6000
    post_nms_top_n_train: int = 2000
    pre_nms_top_n_eval: int = 3000
    post_nms_top_n_eval: int = 300
    detection_nms: float = 0.3
    score_floor: float = 0.05
    max_detections: int = 100
    min_box_size: float = 1.0

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        self.anchor_ratios = tuple(self.anchor_ratios)
        if self.image_size % 32:
            raise InvalidArgumentError("image size must be divisible by 32")

    @classmethod
    def micro(cls, decoder_type="type2", **overrides):
        # width 8 is enough for gradient checks but too narrow to learn the phantoms
        params = dict(backbone=BackboneConfig.micro(decoder_type, width=16), image_size=64, hidden=128,
                      dropout=0.0)
        params.update(overrides)
        return cls(**params)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["backbone"] = self.backbone.to_dict()
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown detector config keys: {sorted(unknown)}")
        bb = d.pop("backbone", {})
        if not isinstance(bb, BackboneConfig):
            unknown = set(bb) - {f.name for f in fields(BackboneConfig)}
            if unknown:
                raise InvalidArgumentError(f"unknown backbone config keys: {sorted(unknown)}")
            bb = BackboneConfig(**bb)
        return cls(backbone=bb, **d)


@dataclass
class Detections:
    boxes: np.ndarray
    scores: np.ndarray


class NoduleDetector(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        bb = cfg.backbone
        self.backbone = Backbone(bb)
        self.rpn = RPNHead(bb.pyramid_channels, len(cfg.anchor_ratios))
        self.classifier = Classifier(bb.pyramid_channels, cfg.pool_size, cfg.hidden, cfg.dropout)
        self._anchor_cache = {}

    def anchors(self, image_size):
        key = tuple(image_size)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = tg.generate_anchors(
                key, PYRAMID_STRIDES, self.cfg.backbone.anchor_scales, self.cfg.anchor_ratios)
        return self._anchor_cache[key]

    def forward(self, images):
        pyramid = self.backbone(images)
        return pyramid, self.rpn(pyramid)

    @torch.no_grad()
    def proposals(self, rpn_out, image_size, training):
        """Decode, clip, rank and suppress RPN boxes.  Returns one ``(boxes, scores)`` per image."""
        cfg = self.cfg
        anchors = self.anchors(image_size)
        pre_n = cfg.pre_nms_top_n_train if training else cfg.pre_nms_top_n_eval
        post_n = cfg.post_nms_top_n_train if training else cfg.post_nms_top_n_eval
        h, w = image_size
        out = []
        scores_all = torch.sigmoid(rpn_out.objectness).double().cpu().numpy()
        deltas_all = rpn_out.deltas.double().cpu().numpy()
        for scores, deltas in zip(scores_all, deltas_all):
            order = np.argsort(-scores, kind="stable")[:pre_n]
            boxes = tg.decode_box(anchors.boxes[order], np.clip(deltas[order], -10, 10))
            boxes = clip_boxes(boxes, w, h)
            keep = valid_mask(boxes, cfg.min_box_size)
            boxes, s = boxes[keep], scores[order][keep]
            kept = tg.nms(boxes, s, cfg.proposal_nms)[:post_n]
            out.append((boxes[kept], s[kept]))
        return out

    @torch.no_grad()
    def detect(self, images):
        """Inference: proposals, classifier rescoring, box refinement, final NMS.

        A detection's confidence is the RPN objectness of its proposal
        times the classifier's nodule probability.
        """
        was_training = self.training
        self.eval()
        try:
            if images.dim() == 3:
                images = images[None]
            image_size = tuple(images.shape[-2:])
            pyramid, rpn_out = self(images)
            props = self.proposals(rpn_out, image_size, training=False)
            results = []
            for n, (boxes, objectness) in enumerate(props):
                if len(boxes) == 0:
                    results.append(Detections(np.zeros((0, 4)), np.zeros(0)))
                    continue
                pooled, _ = pool_pyramid(pyramid, boxes, np.full(len(boxes), n),
                                         self.cfg.pool_size, self.cfg.sampling_ratio)
                head = self.classifier(pooled)
                # the classifier never trains on proposals below 0.3 IoU, so objectness gates it
                scores = objectness * head.class_scores[:, 1].double().cpu().numpy()
                refined = tg.decode_box(boxes, np.clip(head.deltas.double().cpu().numpy(), -10, 10))
                refined = clip_boxes(refined, image_size[1], image_size[0])
                keep = valid_mask(refined, 1e-3) & (scores >= self.cfg.score_floor)
                refined, scores = refined[keep], scores[keep]
                kept = tg.nms(refined, scores, self.cfg.detection_nms)[: self.cfg.max_detections]
                results.append(Detections(refined[kept], scores[kept]))
            return results
        finally:
            self.train(was_training)


def parameter_count(module):
    return sum(p.numel() for p in module.parameters())
