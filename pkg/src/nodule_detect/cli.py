"""Command-line entry point: ``nodule-detect generate|train|eval|predict``.

Settings come from built-in defaults, then an optional JSON file given
with ``--config``, then command-line flags.  Every command prints the
fully resolved configuration before doing any work.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import data as D
from . import evaluation as E
from .backbone import DecoderType
from .boxes import Box
from .errors import IngestError, InvalidArgumentError, NoduleDetectError, VersionError
from .model import DetectorConfig
from .train import TrainConfig, fit, load_checkpoint

CACHE_ENV = "NODULE_DETECT_CACHE"
DETECTION_COLUMNS = ["image_id", "x1", "y1", "x2", "y2", "confidence"]
PRESETS = ("full", "micro")


def default_data_dir():
    root = os.environ.get(CACHE_ENV)
    base = Path(root) if root else Path.home() / ".cache" / "nodule_detect"
    return base / "phantoms"


@dataclass
class EvalOptions:
    iou_threshold: float = E.TP_IOU
    overlay_upscale: int = 4


@dataclass
class RunConfig:
    preset: str = "full"
    phantom: dict = field(default_factory=dict)
    detector: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    detector_given: bool = False      # checkpoints are checked against the detector only when set

    SECTIONS = ("phantom", "detector", "train", "eval", "paths")
    PATH_KEYS = ("data", "out", "checkpoint")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"preset", *cls.SECTIONS}
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**{k: (dict(v) if k in cls.SECTIONS else v) for k, v in d.items()})
        cfg.resolve()      # validates every section
        return cfg

    def _check(self, name, allowed):
        unknown = set(getattr(self, name)) - set(allowed)
        if unknown:
            raise InvalidArgumentError(f"unknown keys in '{name}': {sorted(unknown)}")

    def resolve(self):
        """Build the typed configs.  Returns ``(phantom, detector, train, eval_options)``."""
        if self.preset not in PRESETS:
            raise InvalidArgumentError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        self._check("phantom", [f.name for f in fields(D.PhantomConfig)])
        self._check("train", [f.name for f in fields(TrainConfig)])
        self._check("eval", [f.name for f in fields(EvalOptions)])
        self._check("paths", self.PATH_KEYS)
        phantom = D.PhantomConfig(**self.phantom)
        base = (DetectorConfig.micro() if self.preset == "micro" else DetectorConfig()).to_dict()
        det = dict(self.detector)
        base["backbone"].update(det.pop("backbone", {}))
        base.update(det)
        detector = DetectorConfig.from_dict(base)
        return phantom, detector, TrainConfig(**self.train), EvalOptions(**self.eval)

    def dump(self):
        phantom, detector, train, ev = self.resolve()
        return {
            "preset": self.preset,
            "phantom": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(phantom).items()},
            "detector": detector.to_dict(),
            "train": train.to_dict(),
            "eval": asdict(ev),
            "paths": dict(self.paths),
        }


def _load_config(args):
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise IngestError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise InvalidArgumentError("a config file holds one JSON object")
    cfg = RunConfig.from_dict(raw)
    cfg.detector_given = bool(raw.get("detector")) or "preset" in raw or bool(getattr(args, "preset", None))
    # flags win over the file
    if getattr(args, "preset", None):
        cfg.preset = args.preset
    if getattr(args, "seed", None) is not None:
        cfg.phantom["seed"] = args.seed
        cfg.train["seed"] = args.seed
    if getattr(args, "decoder", None):
        cfg.detector.setdefault("backbone", {})["decoder_type"] = DecoderType.parse(args.decoder).value
    for flag, section, key in (("n_volumes", "phantom", "n_volumes"), ("image_size", "phantom", "image_size"),
                               ("epochs", "train", "epochs"), ("batch_size", "train", "batch_size")):
        if getattr(args, flag, None) is not None:
            getattr(cfg, section)[key] = getattr(args, flag)
    for key in RunConfig.PATH_KEYS:
        if getattr(args, key, None) is not None:
            cfg.paths[key] = str(getattr(args, key))
    return cfg


def _print_config(cfg, stream=None):
    print("resolved config:", file=stream or sys.stdout)
    print(json.dumps(cfg.dump(), indent=2, sort_keys=True), file=stream or sys.stdout)


def _check_device(name):
    if name not in (None, "cpu", "auto"):
        raise InvalidArgumentError(f"device {name!r} is not supported; this build runs on the CPU")


def _data_dir(cfg):
    return Path(cfg.paths.get("data") or default_data_dir())


# -- generate ----------------------------------------------------------------------

def cmd_generate(args):
    cfg = _load_config(args)
    phantom, *_ = cfg.resolve()
    out = Path(cfg.paths.get("out") or cfg.paths.get("data") or default_data_dir())
    _print_config(cfg)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise InvalidArgumentError(f"{out} is not empty; pass --force to overwrite")
        for p in (out / "volumes").glob("*.vol"):
            p.unlink()
        for name in ("annotations.csv", "dataset.json"):
            (out / name).unlink(missing_ok=True)
    phantoms = D.generate_phantoms(phantom)
    out.mkdir(parents=True, exist_ok=True)
    records = D.save_dataset(out, phantoms)
    (out / "dataset.json").write_text(json.dumps(cfg.dump()["phantom"], indent=2, sort_keys=True))
    print(f"wrote {len(phantoms)} volumes and {len(records)} annotations to {out}")
    return 0


# -- train -------------------------------------------------------------------------

def _decoder_given(cfg):
    return "decoder_type" in cfg.detector.get("backbone", {})


def cmd_train(args):
    cfg = _load_config(args)
    if not _decoder_given(cfg):
        raise InvalidArgumentError("training needs a decoder: pass --decoder type1|type2 "
                                   "or set detector.backbone.decoder_type")
    _check_device(args.device)
    _, detector, train_cfg, _ = cfg.resolve()
    data_dir = _data_dir(cfg)
    out = Path(cfg.paths.get("out") or "runs/train")
    _print_config(cfg)
    samples, p99 = D.load_dataset(data_dir, image_size=detector.image_size)
    if not samples:
        raise IngestError(f"{data_dir} holds no annotated samples")
    print(f"training {detector.backbone.decoder_type.value} on {len(samples)} samples from {data_dir}")
    result = fit(samples, detector, train_cfg, out_dir=out, resume=args.resume,
                 on_epoch=lambda r: print(f"epoch {r['epoch']:3d}  lr {r['lr']:.0e}  total {r['total']:.4f}  "
                                          f"rpn {r['rpn_cls']:.4f}/{r['rpn_reg']:.4f}  "
                                          f"head {r['head_cls']:.4f}/{r['head_reg']:.4f}", flush=True),
                 meta={"p99": p99, "data": str(data_dir)})
    print(f"wrote {len(result.checkpoints)} checkpoints to {out / 'checkpoints'}")
    return 0


# -- inference helpers ---------------------------------------------------------------

def _load_model(cfg):
    path = cfg.paths.get("checkpoint")
    if not path:
        raise InvalidArgumentError("--checkpoint is required")
    if not Path(path).is_file():
        raise IngestError(f"checkpoint not found: {path}")
    expect = cfg.resolve()[1] if cfg.detector_given else None
    model, payload = load_checkpoint(path, expect=expect)
    stored = model.cfg.backbone.decoder_type
    if _decoder_given(cfg):
        wanted = DecoderType.parse(cfg.detector["backbone"]["decoder_type"])
        if wanted is not stored:
            raise VersionError(f"checkpoint was trained with decoder {stored.value}, asked for {wanted.value}")
    return model.eval(), payload["manifest"].get("meta", {})


def _run_model(model, stack):
    """Detect on ``stack`` at the model's input size; boxes come back in the stack's own pixels."""
    size = model.cfg.image_size
    h, w = stack.pixels.shape[:2]
    work = D.resize_with_boxes(stack, size) if (h, w) != (size, size) else stack
    image = torch.as_tensor(np.ascontiguousarray(work.pixels.transpose(2, 0, 1)), dtype=torch.float32)
    d = model.detect(image)[0]
    return d.boxes * np.array([w / size, h / size, w / size, h / size]), d.scores


def _write_detections(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DETECTION_COLUMNS)
        for image_id, box, score in rows:
            w.writerow([image_id, *(repr(float(v)) for v in box), repr(float(score))])


def read_detections(path):
    """Read a detections CSV into ``{image_id: (boxes, scores)}``."""
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"detections file not found: {path}")
    out, problems = {}, []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != DETECTION_COLUMNS:
            raise IngestError(f"{path}: header must be {','.join(DETECTION_COLUMNS)}, got {header}")
        for row in reader:
            if not row:
                continue
            try:
                if len(row) != len(DETECTION_COLUMNS):
                    raise ValueError(f"expected {len(DETECTION_COLUMNS)} fields, got {len(row)}")
                box = Box(*(float(v) for v in row[1:5]))
                score = float(row[5])
                if not 0.0 <= score <= 1.0:
                    raise ValueError(f"confidence {score} outside [0, 1]")
            except ValueError as exc:
                problems.append((reader.line_num, str(exc)))
                continue
            boxes, scores = out.setdefault(row[0], ([], []))
            boxes.append(tuple(box))
            scores.append(score)
    if problems:
        raise IngestError(f"{path}: {len(problems)} malformed row(s): "
                          + "; ".join(f"line {ln}: {m}" for ln, m in problems), problems)
    return {k: (np.array(b, dtype=np.float64).reshape(-1, 4), np.array(s)) for k, (b, s) in out.items()}


# -- eval --------------------------------------------------------------------------

def cmd_eval(args):
    cfg = _load_config(args)
    _check_device(args.device)
    *_, ev = cfg.resolve()
    out = Path(cfg.paths.get("out") or "runs/eval")
    data_dir = _data_dir(cfg)
    _print_config(cfg)
    if args.detections_file:
        samples, _ = D.load_dataset(data_dir)
        if not samples:
            raise IngestError(f"{data_dir} holds no annotated samples")
        dets = read_detections(args.detections_file)
        unknown = set(dets) - {s.key_slice_id for s in samples}
        if unknown:
            raise IngestError(f"detections reference unknown images: {sorted(unknown)[:5]}")
        empty = (np.zeros((0, 4)), np.zeros(0))
        per_scan = [(dets.get(s.key_slice_id, empty), s.box_array) for s in samples]
        name = Path(args.detections_file).stem
    else:
        model, meta = _load_model(cfg)
        samples, _ = D.load_dataset(data_dir, p99=meta.get("p99"))
        if not samples:
            raise IngestError(f"{data_dir} holds no annotated samples")
        per_scan, rows = [], []
        for s in samples:
            boxes, scores = _run_model(model, s)
            per_scan.append(((boxes, scores), s.box_array))
            rows += [(s.key_slice_id, b, sc) for b, sc in zip(boxes, scores)]
        out.mkdir(parents=True, exist_ok=True)
        _write_detections(out / "detections.csv", rows)
        name = model.cfg.backbone.decoder_type.value
    curve = E.froc(per_scan, ev.iou_threshold)
    E.emit_report(curve, out, title=f"FROC {name}")
    print(E.format_table({name: curve}))
    print(f"report written to {out}")
    return 0


# -- predict -----------------------------------------------------------------------

def _predict_inputs(path, p99):
    """Yield ``(image_id, stack, gts)`` from a dataset dir, a .vol file or a dir of .vol files.

    Raw volumes carry no ground truth, so ``gts`` is None for them.
    """
    path = Path(path)
    if (path / "annotations.csv").is_file():
        samples, _ = D.load_dataset(path, p99=p99)
        for s in samples:
            yield s.key_slice_id, s, s.box_array
        return
    if path.is_dir():
        files = sorted(path.glob("*.vol"))
        if not files:
            raise IngestError(f"{path} holds no .vol volumes")
    elif path.is_file():
        files = [path]
    else:
        raise IngestError(f"cannot read input {path}")
    for f in files:
        vol = D.read_volume(f)
        scale = p99 or D.dataset_percentile_99(list(vol))
        norm = [D.normalize_hu(s, scale) for s in vol]
        for k in range(len(norm)):
            yield f"{f.stem}:{k}", D.make_slice_stack(norm, k, key_slice_id=f"{f.stem}:{k}"), None


def cmd_predict(args):
    cfg = _load_config(args)
    _check_device(args.device)
    *_, ev = cfg.resolve()
    out = Path(cfg.paths.get("out") or "runs/predict")
    _print_config(cfg)
    model, meta = _load_model(cfg)
    rows = []
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    for image_id, stack, gts in _predict_inputs(args.input, meta.get("p99")):
        boxes, scores = _run_model(model, stack)
        rows += [(image_id, b, s) for b, s in zip(boxes, scores)]
        is_tp = None if gts is None else E.match_detections((boxes, scores), gts, ev.iou_threshold).is_tp
        E.draw_overlay(stack.pixels, gts if gts is not None else [], boxes, scores, is_tp,
                       out / "overlays" / f"{image_id.replace(':', '_')}.png", ev.overlay_upscale)
    _write_detections(out / "detections.csv", rows)
    print(f"{len(rows)} detections written to {out / 'detections.csv'}")
    return 0


# -- argument parsing --------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="nodule-detect", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--preset", choices=PRESETS, help="model size preset (default: full)")
        p.add_argument("--device", default=None, help="execution device hint (cpu)")

    g = sub.add_parser("generate", help="write a synthetic phantom dataset")
    common(g)
    g.add_argument("--n-volumes", type=int, dest="n_volumes")
    g.add_argument("--image-size", type=int, dest="image_size")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a detector")
    common(t)
    t.add_argument("--data", type=Path, help=f"dataset directory (default: ${CACHE_ENV}/phantoms)")
    t.add_argument("--decoder", help="type1 or type2")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="FROC evaluation of a checkpoint or a detections file")
    common(e)
    e.add_argument("--data", type=Path)
    e.add_argument("--checkpoint")
    e.add_argument("--decoder", help="expected decoder; a mismatching checkpoint is rejected")
    e.add_argument("--detections-file", dest="detections_file",
                   help="score this detections CSV instead of running a model")
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="detect nodules and write overlays")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--decoder")
    p.add_argument("input", help="dataset directory, .vol file, or directory of .vol files")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NoduleDetectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
