"""Multi-task loss, initialization, optimizer schedule and the training loop."""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import targets as tg
from .data import augment
from .errors import EmptyMinibatchError, InvalidArgumentError, NonFiniteLossError, VersionError
from .heads import pool_pyramid
from .model import DetectorConfig, NoduleDetector

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
TRAIN_LOG_COLUMNS = ["epoch", "rpn_cls", "rpn_reg", "head_cls", "head_reg", "total", "lr"]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    lr_after_epoch5: float = 1e-4
    lr_drop_epoch: int = 5
    epochs: int = 15
    batch_size: int = 2
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be >= 1")
        if min(self.learning_rate, self.eps, self.lr_after_epoch5, self.batch_size) <= 0:
            raise InvalidArgumentError("learning rates, eps and batch size must be positive")
        if self.weight_decay < 0:
            raise InvalidArgumentError("weight decay must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class LossBreakdown:
    rpn_cls: object = 0.0
    rpn_reg: object = 0.0
    head_cls: object = 0.0
    head_reg: object = 0.0
    total: object = 0.0
    n_cls: int = 0
    n_reg: int = 0
    lam: float = 1.0

    def as_floats(self):
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("rpn_cls", "rpn_reg", "head_cls", "head_reg", "total")}


def smooth_l1(x):
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.  Scalars, numpy arrays and tensors."""
    if isinstance(x, torch.Tensor):
        ax = x.abs()
        return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)
    if np.ndim(x) == 0:
        ax = abs(float(x))
        return 0.5 * ax * ax if ax < 1 else ax - 0.5
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < 1, 0.5 * x * x, ax - 0.5)


def _stage_terms(logits, deltas, labels, reg_targets):
    labels = torch.as_tensor(labels).long()
    n_cls = int(labels.numel())
    if n_cls == 0:
        raise EmptyMinibatchError("no sampled anchors or proposals")
    if logits.dim() == 1:
        cls = F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), reduction="sum") / n_cls
    else:
        cls = F.cross_entropy(logits, labels, reduction="sum") / n_cls
    pos = labels == 1
    n_reg = int(pos.sum())
    if n_reg:
        t = torch.as_tensor(reg_targets, dtype=deltas.dtype)
        reg = smooth_l1(deltas[pos] - t[pos]).sum() / n_reg
    else:
        reg = deltas.sum() * 0.0
    return cls, reg, n_cls, n_reg


def multitask_loss(rpn=None, head=None, lam=1.0):
    """Combined detection loss.

    ``rpn`` and ``head`` are each ``(logits, deltas, labels, reg_targets)``
    restricted to the sampled anchors / proposals, or ``None`` to skip the
    stage.  RPN logits are one per anchor (binary log-loss); classifier
    logits are ``(M, 2)`` (softmax log-loss).  Each stage contributes
    ``cls / N_cls + lam * reg / N_reg`` with ``N_cls`` the sample count
    and ``N_reg`` the positive count; regression uses positives only.
    """
    if rpn is None and head is None:
        raise EmptyMinibatchError("no stage to compute a loss for")
    out = LossBreakdown(lam=lam)
    total = 0.0
    for name, stage in (("rpn", rpn), ("head", head)):
        if stage is None:
            continue
        cls, reg, n_cls, n_reg = _stage_terms(*stage)
        setattr(out, f"{name}_cls", cls)
        setattr(out, f"{name}_reg", reg)
        out.n_cls += n_cls
        out.n_reg += n_reg
        total = total + cls + lam * reg
    out.total = total
    return out


def lr_schedule(epoch, cfg):
    if epoch < 1:
        raise InvalidArgumentError("epochs are numbered from 1")
    return cfg.learning_rate if epoch <= cfg.lr_drop_epoch else cfg.lr_after_epoch5


def _is_kernel(module):
    return isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear))


def init_parameters(model, seed=0):
    """Xavier-uniform kernels, zero biases, unit-scale zero-shift batch norm."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if _is_kernel(m):
                fan_in, fan_out = nn.init._calculate_fan_in_and_fan_out(m.weight)
                a = math.sqrt(6.0 / (fan_in + fan_out))
                m.weight.uniform_(-a, a, generator=g)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.reset_running_stats()
                m.weight.fill_(1.0)
                m.bias.zero_()
    return model


def kernel_parameters(model):
    """(decay, no_decay) parameter lists: kernels decay, biases and BN do not."""
    decay, no_decay = [], []
    kernel_ids = {id(m.weight) for m in model.modules() if _is_kernel(m)}
    for p in model.parameters():
        (decay if id(p) in kernel_ids else no_decay).append(p)
    return decay, no_decay


def make_optimizer(model, cfg):
    decay, no_decay = kernel_parameters(model)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)


def training_loss(model, images, gt_boxes, rng, lam=1.0, proposals=None):
    """Forward both stages on a batch and return the joint :class:`LossBreakdown`.

    ``proposals`` (one box array per image) replaces the RPN's own
    proposals; gradient checks use it to keep the loss a smooth function
    of the parameters.
    """
    cfg = model.cfg
    image_size = tuple(images.shape[-2:])
    anchors = model.anchors(image_size)
    pyramid, rpn_out = model(images)

    rpn_logits, rpn_deltas, rpn_labels, rpn_targets = [], [], [], []
    for n, gts in enumerate(gt_boxes):
        labels = tg.assign_rpn_labels(anchors, gts)
        idx = tg.sample_rpn_minibatch(labels, cfg.rpn_batch_size, cfg.rpn_positive_fraction, rng)
        idx_t = torch.as_tensor(idx)
        rpn_logits.append(rpn_out.objectness[n, idx_t])
        rpn_deltas.append(rpn_out.deltas[n, idx_t])
        rpn_labels.append(labels.cls[idx])
        rpn_targets.append(labels.reg_targets[idx])
    rpn_stage = (torch.cat(rpn_logits), torch.cat(rpn_deltas),
                 np.concatenate(rpn_labels), np.concatenate(rpn_targets))

    if proposals is None:
        props = [b for b, _ in model.proposals(rpn_out, image_size, training=True)]
    else:
        props = [np.asarray(b, dtype=np.float64).reshape(-1, 4) for b in proposals]
    roi_boxes, roi_batch, roi_labels, roi_targets = [], [], [], []
    for n, (boxes, gts) in enumerate(zip(props, gt_boxes)):
        gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
        # ground truths join the proposal pool so early epochs have foreground ROIs
        boxes = np.concatenate([boxes, gts])
        labels = tg.assign_classifier_labels(boxes, gts)
        try:
            idx = tg.sample_rpn_minibatch(labels, cfg.roi_batch_size, cfg.roi_positive_fraction, rng)
        except EmptyMinibatchError:
            continue
        roi_boxes.append(boxes[idx])
        roi_batch.append(np.full(len(idx), n))
        roi_labels.append(labels.cls[idx])
        roi_targets.append(labels.reg_targets[idx])
    head_stage = None
    if roi_boxes:
        pooled, _ = pool_pyramid(pyramid, np.concatenate(roi_boxes), np.concatenate(roi_batch),
                                 cfg.pool_size, cfg.sampling_ratio)
        head = model.classifier(pooled)
        head_stage = (head.logits, head.deltas, np.concatenate(roi_labels), np.concatenate(roi_targets))
    return multitask_loss(rpn_stage, head_stage, lam)


def _check_finite(loss):
    for name in ("rpn_cls", "rpn_reg", "head_cls", "head_reg", "total"):
        v = float(torch.as_tensor(getattr(loss, name)).detach())
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)


def _epoch_seed(seed, epoch):
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _batches(samples, order, batch_size, rng, do_augment, dtype):
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        if do_augment:
            chunk = [augment(s, rng) for s in chunk]
        images = torch.as_tensor(np.stack([s.pixels.transpose(2, 0, 1) for s in chunk]), dtype=dtype)
        yield images, [s.box_array for s in chunk]


@dataclass
class FitResult:
    model: NoduleDetector
    history: list
    checkpoints: list


def save_checkpoint(path, model, optimizer, epoch, train_cfg, history=(), meta=None):
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "epoch": epoch,
        "detector": model.cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "meta": dict(meta or {}),
    }
    torch.save({
        "manifest": manifest,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "history": list(history),
    }, path)
    return manifest


def load_checkpoint(path, expect=None):
    """Load a checkpoint written by :func:`save_checkpoint`.

    Returns ``(model, payload)``.  If ``expect`` (a DetectorConfig) is
    given and differs from the stored one, raises VersionError.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    manifest = payload.get("manifest", {})
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise VersionError(f"{path}: checkpoint format {manifest.get('format')} != {CHECKPOINT_FORMAT}")
    cfg = DetectorConfig.from_dict(manifest["detector"])
    if expect is not None and expect.to_dict() != cfg.to_dict():
        diff = sorted(k for k, v in expect.to_dict().items() if cfg.to_dict().get(k) != v)
        raise VersionError(f"{path}: checkpoint config differs in {diff}")
    model = NoduleDetector(cfg)
    model.load_state_dict(payload["model"])
    return model, payload


def fit(samples, detector_cfg, cfg, out_dir=None, resume=None, dtype=torch.float32, on_epoch=None,
        meta=None):
    """Jointly train RPN and classifier on ``samples`` (a list of SliceStack).

    Writes ``checkpoints/epoch_XXX.pt`` and ``train_log.csv`` under
    ``out_dir`` when given.  ``resume`` is a checkpoint path; training
    continues from the epoch after it with identical randomness.
    ``meta`` is a JSON-able dict copied into every manifest.
    """
    if not samples:
        raise InvalidArgumentError("empty training set")
    if resume is not None:
        model, payload = load_checkpoint(resume, expect=detector_cfg)
        model = model.to(dtype)
        start = payload["manifest"]["epoch"] + 1
        history = list(payload.get("history", []))
    else:
        model = init_parameters(NoduleDetector(detector_cfg), cfg.seed).to(dtype)
        start, history, payload = 1, [], None
    optimizer = make_optimizer(model, cfg)
    if payload is not None and payload.get("optimizer") is not None:
        optimizer.load_state_dict(payload["optimizer"])

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpts = []
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        manifest = {"format": CHECKPOINT_FORMAT, "detector": detector_cfg.to_dict(), "train": cfg.to_dict(),
                    "meta": dict(meta or {})}
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
        log_path = out_dir / "train_log.csv"
        if start == 1 or not log_path.exists():
            with open(log_path, "w", newline="") as fh:
                csv.writer(fh).writerow(TRAIN_LOG_COLUMNS)

    for epoch in range(start, cfg.epochs + 1):
        lr = lr_schedule(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        seed = _epoch_seed(cfg.seed, epoch)
        rng = np.random.default_rng(seed)
        torch.manual_seed(seed)
        model.train()
        order = rng.permutation(len(samples))
        sums = dict.fromkeys(("rpn_cls", "rpn_reg", "head_cls", "head_reg", "total"), 0.0)
        n_steps = 0
        for images, boxes in _batches(samples, order, cfg.batch_size, rng, cfg.augment, dtype):
            loss = training_loss(model, images, boxes, rng)
            _check_finite(loss)
            optimizer.zero_grad(set_to_none=True)
            loss.total.backward()
            optimizer.step()
            for k, v in loss.as_floats().items():
                sums[k] += v
            n_steps += 1
        row = {k: v / n_steps for k, v in sums.items()}
        row.update(epoch=epoch, lr=lr)
        history.append(row)
        log.info("epoch %d  total %.4f  rpn %.4f/%.4f  head %.4f/%.4f", epoch, row["total"],
                 row["rpn_cls"], row["rpn_reg"], row["head_cls"], row["head_reg"])
        if out_dir is not None:
            path = out_dir / "checkpoints" / f"epoch_{epoch:03d}.pt"
            save_checkpoint(path, model, optimizer, epoch, cfg, history, meta)
            ckpts.append(path)
            with open(out_dir / "train_log.csv", "a", newline="") as fh:
                csv.writer(fh).writerow([row[c] for c in TRAIN_LOG_COLUMNS])
        if on_epoch is not None:
            on_epoch(row)
    return FitResult(model, history, ckpts)
