"""Detection matching, FROC analysis and report output."""

import csv
import json
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from . import kernels
from .boxes import Box, as_box_array
from .errors import InvalidArgumentError, UndefinedSensitivityError

FP_RATES = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0)
TP_IOU = 0.5

GT_COLOR = (0, 0, 255)
TP_COLOR = (0, 200, 0)
FP_COLOR = (255, 0, 0)
UNVERIFIED_COLOR = (255, 200, 0)


@dataclass(frozen=True)
class Detection:
    box: Box
    confidence: float
    scan_id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidArgumentError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class MatchResult:
    is_tp: np.ndarray     # per detection, input order
    gt_hit: np.ndarray    # per ground truth
    det_to_gt: np.ndarray


@dataclass
class FrocCurve:
    thresholds: list      # first entry is +inf (nothing accepted)
    points: list          # (avg_fp_per_scan, sensitivity), same order as thresholds
    sens_at: dict = field(default_factory=dict)
    average_froc: float = 0.0

    def to_summary(self):
        d = {f"sens_at_{_rate_key(f)}": self.sens_at[f] for f in FP_RATES}
        d["average_froc"] = self.average_froc
        d["thresholds"] = [None if math.isinf(t) else t for t in self.thresholds]
        d["points"] = [list(p) for p in self.points]
        return d

    @classmethod
    def from_summary(cls, d):
        return cls(
            thresholds=[math.inf if t is None else float(t) for t in d["thresholds"]],
            points=[tuple(p) for p in d["points"]],
            sens_at={f: float(d[f"sens_at_{_rate_key(f)}"]) for f in FP_RATES},
            average_froc=float(d["average_froc"]),
        )


def _rate_key(f):
    return f"{f:g}"


def _as_scan(dets):
    """Normalize detections for one scan to ``(boxes, scores)`` arrays."""
    if hasattr(dets, "boxes") and hasattr(dets, "scores"):
        return as_box_array(dets.boxes), np.asarray(dets.scores, dtype=np.float64).ravel()
    if isinstance(dets, tuple) and len(dets) == 2 and not isinstance(dets[0], Detection):
        return as_box_array(dets[0]), np.asarray(dets[1], dtype=np.float64).ravel()
    dets = list(dets)
    boxes = as_box_array([d.box for d in dets])
    return boxes, np.array([d.confidence for d in dets], dtype=np.float64)


def detection_order(scores):
    """Descending confidence; equal confidences keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def match_detections(dets, gts, iou_thr=TP_IOU):
    """Greedy one-to-one matching, most confident detection first.

    A detection is a TP when its best still-unmatched ground truth
    overlaps it with IoU above ``iou_thr``; otherwise it is an FP.
    """
    boxes, scores = _as_scan(dets)
    gts = as_box_array(gts)
    order = detection_order(scores)
    tp_sorted, gt_hit, d2g_sorted = kernels.greedy_match(boxes[order], gts, float(iou_thr))
    is_tp = np.zeros(len(boxes), dtype=bool)
    det_to_gt = np.full(len(boxes), -1, dtype=np.int64)
    is_tp[order] = tp_sorted
    det_to_gt[order] = d2g_sorted
    return MatchResult(is_tp, gt_hit, det_to_gt)


def average_froc(sens_at):
    values = list(sens_at.values()) if isinstance(sens_at, dict) else list(sens_at)
    if len(values) != len(FP_RATES):
        raise InvalidArgumentError(f"expected {len(FP_RATES)} sensitivities, got {len(values)}")
    return float(sum(values) / len(values))


def sensitivity_at(points, rate):
    """Best sensitivity among operating points whose average FP count does not exceed ``rate``."""
    return max(s for fp, s in points if fp <= rate)


def froc(per_scan, iou_thr=TP_IOU):
    """FROC curve over scans given as ``(detections, ground_truth_boxes)`` pairs.

    Every distinct confidence is a threshold (detections with confidence
    >= threshold are kept).  Sensitivities at the standard FP rates use
    step interpolation.
    """
    per_scan = list(per_scan)
    if not per_scan:
        raise InvalidArgumentError("no scans")
    scores_all, tp_all = [], []
    total_gts = 0
    for dets, gts in per_scan:
        boxes, scores = _as_scan(dets)
        gts = as_box_array(gts)
        total_gts += len(gts)
        m = match_detections((boxes, scores), gts, iou_thr)
        scores_all.append(scores)
        tp_all.append(m.is_tp)
    if total_gts == 0:
        raise UndefinedSensitivityError("no ground-truth lesions; sensitivity is undefined")
    scores = np.concatenate(scores_all) if scores_all else np.zeros(0)
    is_tp = np.concatenate(tp_all) if tp_all else np.zeros(0, dtype=bool)
    n_scans = len(per_scan)

    thresholds = np.unique(scores)[::-1]
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    tp_cum = np.cumsum(is_tp[order])
    fp_cum = np.cumsum(~is_tp[order])
    # last index with score >= t, for each threshold t
    last = np.searchsorted(-s_sorted, -thresholds, side="right") - 1
    points = [(0.0, 0.0)]
    points += [(float(fp_cum[i]) / n_scans, float(tp_cum[i]) / total_gts) for i in last]
    th = [math.inf] + [float(t) for t in thresholds]
    sens_at = {f: sensitivity_at(points, f) for f in FP_RATES}
    return FrocCurve(th, points, sens_at, average_froc(sens_at))


def _pct(v):
    # half-up on a 10-decimal rendering, so an exact mean like 75.05 prints as 75.1
    return str(Decimal(f"{100 * v:.10f}").quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def format_table(curves):
    """Render ``{name: FrocCurve}`` as a sensitivity-at-FP-rate table, in percent."""
    header = ["Model"] + [_rate_key(f) for f in FP_RATES] + ["Avg"]
    rows = [header]
    for name, c in curves.items():
        rows.append([name] + [_pct(c.sens_at[f]) for f in FP_RATES] + [_pct(c.average_froc)])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths)))
             for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def emit_report(curve, out_dir, title="FROC"):
    """Write ``froc.csv``, ``summary.json`` and ``froc.png`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "froc.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "avg_fp_per_scan", "sensitivity"])
        for t, (fp, s) in zip(curve.thresholds, curve.points):
            w.writerow([repr(t), repr(fp), repr(s)])
    (out_dir / "summary.json").write_text(json.dumps(curve.to_summary(), indent=2))
    plot_froc(curve, out_dir / "froc.png", title)
    return [out_dir / "froc.csv", out_dir / "summary.json", out_dir / "froc.png"]


def read_froc_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(float(r["threshold"]), float(r["avg_fp_per_scan"]), float(r["sensitivity"])) for r in rows]


def plot_froc(curve, path, title="FROC"):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fps = [max(p[0], 1e-3) for p in curve.points]
    sens = [p[1] for p in curve.points]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.step(fps, sens, where="post")
    ax.plot(FP_RATES, [curve.sens_at[f] for f in FP_RATES], "o")
    ax.set_xscale("log", base=2)
    ax.set_xlim(0.25, 32)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("Average FPs per scan")
    ax.set_ylabel("Sensitivity")
    ax.set_title(f"{title} (average {100 * curve.average_froc:.1f}%)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def draw_overlay(image, gts, det_boxes, det_scores, is_tp, path, upscale=1):
    """Save an RGB overlay: ground truth blue, TPs green, FPs red, confidence at each box's top-left.

    With ``is_tp=None`` (no ground truth to check against) every detection is drawn amber.
    """
    from PIL import Image, ImageDraw

    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., img.shape[2] // 2]
    lo, hi = np.percentile(img, 1), np.percentile(img, 99)
    gray = np.clip((img - lo) / max(hi - lo, 1e-9), 0, 1)
    pil = Image.fromarray((gray * 255).astype(np.uint8)).convert("RGB")
    if upscale != 1:
        pil = pil.resize((pil.width * upscale, pil.height * upscale), Image.NEAREST)
    draw = ImageDraw.Draw(pil)
    for b in as_box_array(gts):
        draw.rectangle(list(b * upscale), outline=GT_COLOR)
    det_boxes = as_box_array(det_boxes)
    flags = [None] * len(det_boxes) if is_tp is None else is_tp
    for b, s, tp in zip(det_boxes, det_scores, flags):
        color = UNVERIFIED_COLOR if tp is None else TP_COLOR if tp else FP_COLOR
        draw.rectangle(list(b * upscale), outline=color)
        draw.text((b[0] * upscale + 1, b[1] * upscale + 1), f"{s:.2f}", fill=color)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pil.save(path)
    return pil
