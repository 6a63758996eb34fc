"""CT slice preprocessing, 2.5D stacking, augmentation, phantom generation and file I/O."""

import csv
import enum
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .boxes import Box
from .errors import GenerationError, IngestError, InvalidArgumentError

HU_MIN, HU_MAX = -1024, 3071
ANNOTATION_COLUMNS = ["study_id", "key_slice_id", "x1", "y1", "x2", "y2", "lesion_type"]


class LesionType(enum.Enum):
    # DeepLesion coarse type codes
    bone = 1
    abdomen = 2
    mediastinum = 3
    liver = 4
    lung = 5
    kidney = 6
    soft_tissue = 7
    pelvis = 8

    @classmethod
    def parse(cls, text):
        text = str(text).strip()
        if text.lstrip("-").isdigit():
            return cls(int(text))
        return cls[text.lower()]


@dataclass
class RawSlice:
    pixels: np.ndarray
    spacing_mm: tuple = (1.0, 1.0)
    slice_index: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2:
            raise InvalidArgumentError("a slice is a 2-D grid")
        if self.pixels.size and (self.pixels.min() < HU_MIN or self.pixels.max() > HU_MAX):
            raise InvalidArgumentError(f"HU values outside [{HU_MIN}, {HU_MAX}]")
        if len(self.spacing_mm) != 2 or min(self.spacing_mm) <= 0:
            raise InvalidArgumentError("pixel spacing must be two positive values")
        if self.slice_index < 0:
            raise InvalidArgumentError("slice index must be >= 0")


@dataclass
class SliceStack:
    pixels: np.ndarray          # (H, W, 3)
    boxes: list = field(default_factory=list)
    key_slice_id: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise InvalidArgumentError(f"expected an H x W x 3 grid, got {self.pixels.shape}")
        h, w = self.pixels.shape[:2]
        for b in self.boxes:
            if not (0 <= b.x1 < b.x2 <= w and 0 <= b.y1 < b.y2 <= h):
                raise InvalidArgumentError(f"box {tuple(b)} outside a {w}x{h} image")

    @property
    def box_array(self):
        if not self.boxes:
            return np.zeros((0, 4))
        return np.array([tuple(b) for b in self.boxes], dtype=np.float64)


@dataclass(frozen=True)
class AnnotationRecord:
    study_id: str
    key_slice_id: int
    box: Box
    lesion_type: LesionType = LesionType.lung


@dataclass
class PhantomConfig:
    n_volumes: int = 8
    image_size: int = 512
    n_slices: int = 5
    nodules_per_volume: tuple = (1, 3)
    nodule_radius_px: tuple = (4.0, 24.0)
    nodule_aspect_jitter: float = 0.15
    distractor_density: float = 1.0
    slice_thickness_px: float = 2.5
    noise_hu: float = 20.0
    max_retries: int = 200
    seed: int = 0

    def validate(self):
        lo, hi = self.nodule_radius_px
        if self.n_volumes < 0:
            raise InvalidArgumentError("n_volumes must be >= 0")
        if not (2 < lo <= hi < self.image_size / 4):
            raise InvalidArgumentError(
                f"nodule radius range {self.nodule_radius_px} must lie in (2, {self.image_size / 4})")
        if self.nodules_per_volume[0] < 0 or self.nodules_per_volume[0] > self.nodules_per_volume[1]:
            raise InvalidArgumentError("bad nodules_per_volume range")
        if self.distractor_density < 0:
            raise InvalidArgumentError("distractor_density must be >= 0")
        if self.n_slices < 1:
            raise InvalidArgumentError("n_slices must be >= 1")


# -- intensity normalization -------------------------------------------------

def hu_to_attenuation(hu):
    """Water-referenced linear attenuation ``1 + HU/1000``, clipped at zero."""
    return np.clip(1.0 + np.asarray(hu, dtype=np.float64) / 1000.0, 0.0, None)


def nearest_rank_percentile(values, q):
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if values.size == 0:
        raise InvalidArgumentError("percentile of an empty set")
    rank = max(math.ceil(q / 100.0 * values.size), 1)
    return float(values[rank - 1])


def dataset_percentile_99(slices):
    """99th percentile (nearest rank) of attenuation values pooled over all slices."""
    slices = list(slices)
    if not slices:
        raise InvalidArgumentError("no slices given")
    pooled = np.concatenate([
        hu_to_attenuation(s.pixels if isinstance(s, RawSlice) else s).ravel() for s in slices
    ])
    return nearest_rank_percentile(pooled, 99)


def normalize_hu(slice_, p99):
    if p99 <= 0:
        raise InvalidArgumentError("p99 must be positive")
    pixels = slice_.pixels if isinstance(slice_, RawSlice) else slice_
    return hu_to_attenuation(pixels) / p99


# -- sample construction --------------------------------------------------------

def make_slice_stack(volume, key, boxes=(), key_slice_id=None):
    """Stack slices ``key-1, key, key+1`` as channels, replicating the key slice at volume edges."""
    n = len(volume)
    if n == 0:
        raise InvalidArgumentError("empty volume")
    if not 0 <= key < n:
        raise InvalidArgumentError(f"key slice {key} outside volume of {n} slices")
    idx = [key - 1 if key > 0 else key, key, key + 1 if key + 1 < n else key]
    pixels = np.stack([np.asarray(volume[i], dtype=np.float32) for i in idx], axis=-1)
    return SliceStack(pixels, list(boxes), str(key if key_slice_id is None else key_slice_id))


def resize_with_boxes(stack, target):
    if target <= 0:
        raise InvalidArgumentError("target size must be positive")
    h, w = stack.pixels.shape[:2]
    if (h, w) == (target, target):
        return SliceStack(stack.pixels.copy(), list(stack.boxes), stack.key_slice_id)
    t = torch.from_numpy(np.ascontiguousarray(stack.pixels.transpose(2, 0, 1)))[None]
    out = F.interpolate(t.double(), size=(target, target), mode="bilinear", align_corners=False)
    pixels = out[0].numpy().transpose(1, 2, 0).astype(stack.pixels.dtype)
    sx, sy = target / w, target / h
    return SliceStack(pixels, [b.scaled(sx, sy) for b in stack.boxes], stack.key_slice_id)


def _hflip_box(b, w, h):
    return Box(w - b.x2, b.y1, w - b.x1, b.y2)


def _vflip_box(b, w, h):
    return Box(b.x1, h - b.y2, b.x2, h - b.y1)


def _rot90_box(b, w, h):
    # one counter-clockwise quarter turn of a square image, matching np.rot90
    return Box(b.y1, w - b.x2, b.y2, w - b.x1)


def augment(stack, rng, p=0.5):
    """Random horizontal flip, vertical flip and quarter-turn rotation, each with probability ``p``.

    When rotation fires, the number of counter-clockwise quarter turns is
    drawn uniformly from {1, 2, 3}.
    """
    rng = np.random.default_rng(rng)
    do_h, do_v, do_r = rng.random(3) < p
    turns = int(rng.integers(1, 4)) if do_r else 0
    pixels = stack.pixels
    boxes = list(stack.boxes)
    h, w = pixels.shape[:2]
    if turns and h != w:
        raise InvalidArgumentError("rotation needs a square image")
    if do_h:
        pixels = pixels[:, ::-1]
        boxes = [_hflip_box(b, w, h) for b in boxes]
    if do_v:
        pixels = pixels[::-1]
        boxes = [_vflip_box(b, w, h) for b in boxes]
    if turns:
        pixels = np.rot90(pixels, turns, axes=(0, 1))
        for _ in range(turns):
            boxes = [_rot90_box(b, w, h) for b in boxes]
    return SliceStack(np.ascontiguousarray(pixels), boxes, stack.key_slice_id)


# -- synthetic phantoms -------------------------------------------------------------

def _lung_masks(size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2
    body = ((xx - c) / (0.46 * size)) ** 2 + ((yy - c) / (0.38 * size)) ** 2 <= 1
    lungs = np.zeros_like(body)
    for side in (-1, 1):
        lungs |= ((xx - c - side * 0.2 * size) / (0.16 * size)) ** 2 + \
                 ((yy - c) / (0.28 * size)) ** 2 <= 1
    return body, lungs


def _render_volume(cfg, rng, body, lungs):
    size, depth = cfg.image_size, cfg.n_slices
    vol = np.full((depth, size, size), -1000.0)
    vol[:, body] = 40.0
    vol[:, lungs] = -850.0
    z_pos = (np.arange(depth) * cfg.slice_thickness_px)[:, None, None]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    lung_ys, lung_xs = np.nonzero(lungs)

    n_vessels = rng.poisson(cfg.distractor_density * (size / 64.0) ** 2) if cfg.distractor_density else 0
    for _ in range(n_vessels):
        k = rng.integers(len(lung_xs))
        p0 = np.array([lung_xs[k] + 0.5, lung_ys[k] + 0.5, rng.uniform(0, z_pos.max() + 1e-9)])
        # bias toward running through the slab, where vessels look most nodule-like in-plane
        d = rng.normal(size=3) * np.array([1.0, 1.0, 2.5])
        d /= np.linalg.norm(d)
        radius = rng.uniform(1.0, max(1.5, cfg.nodule_radius_px[0] * 0.6))
        rel = np.stack(np.broadcast_arrays(xx[None] - p0[0], yy[None] - p0[1], z_pos - p0[2]), axis=-1)
        along = rel @ d
        dist2 = (rel ** 2).sum(-1) - along ** 2
        mask = (dist2 <= radius ** 2) & lungs[None]
        vol[mask] = rng.uniform(0.0, 80.0)

    key = int(rng.integers(0, depth))
    n_nodules = int(rng.integers(cfg.nodules_per_volume[0], cfg.nodules_per_volume[1] + 1))
    placed, boxes = [], []
    for _ in range(n_nodules):
        for _attempt in range(cfg.max_retries):
            r = rng.uniform(*cfg.nodule_radius_px)
            jit = cfg.nodule_aspect_jitter
            rx = r * (1 + rng.uniform(-jit, jit)) if jit else r
            ry = r * (1 + rng.uniform(-jit, jit)) if jit else r
            k = rng.integers(len(lung_xs))
            cx, cy = lung_xs[k] + rng.uniform(0, 1), lung_ys[k] + rng.uniform(0, 1)
            disk = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1
            if not disk.any() or not lungs[disk].all():
                continue
            if any(math.hypot(cx - px, cy - py) <= max(rx, ry) + pr + 2 for px, py, pr in placed):
                continue
            break
        else:
            raise GenerationError(
                f"could not place nodule {len(placed) + 1} after {cfg.max_retries} attempts")
        placed.append((cx, cy, max(rx, ry)))
        rz = r
        zc = key * cfg.slice_thickness_px
        ell = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 + ((z_pos - zc) / rz) ** 2 <= 1
        vol[ell] = rng.uniform(-20.0, 120.0)
        ys, xs = np.nonzero(disk)
        boxes.append(Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)))

    if cfg.noise_hu:
        vol += rng.normal(0.0, cfg.noise_hu, size=vol.shape)
    vol = np.clip(np.rint(vol), HU_MIN, HU_MAX).astype(np.int16)
    return vol, key, boxes


def generate_phantoms(cfg):
    """Build ``cfg.n_volumes`` synthetic chest volumes.

    Each volume has a soft-tissue body, two low-density lungs, tubular
    vessel-like distractors and bright ellipsoidal nodules.  All nodules
    of a volume are centred on one key slice, so each volume yields
    exactly one annotated sample.  Returns ``[(volume_int16, records)]``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    body, lungs = _lung_masks(cfg.image_size)
    out = []
    for i in range(cfg.n_volumes):
        vol, key, boxes = _render_volume(cfg, rng, body, lungs)
        study = f"phantom_{i:04d}"
        out.append((vol, [AnnotationRecord(study, key, b, LesionType.lung) for b in boxes]))
    return out


# -- files ------------------------------------------------------------------------

def write_volume(path, volume):
    volume = np.asarray(volume, dtype=np.int16)
    depth, h, w = volume.shape
    with open(path, "wb") as fh:
        fh.write(f"{w} {h} {depth}\n".encode("ascii"))
        fh.write(volume.astype("<i2").tobytes(order="C"))


def read_volume(path):
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            header = fh.readline().decode("ascii").split()
            raw = fh.read()
    except OSError as exc:
        raise IngestError(f"cannot read volume {path}: {exc}") from exc
    try:
        w, h, depth = (int(v) for v in header)
    except ValueError:
        raise IngestError(f"{path}: bad header {header!r}, expected 'W H n_slices'") from None
    if len(raw) != 2 * w * h * depth:
        raise IngestError(f"{path}: expected {2 * w * h * depth} bytes of raster, found {len(raw)}")
    return np.frombuffer(raw, dtype="<i2").reshape(depth, h, w).astype(np.int16)


def _fmt(v):
    return repr(float(v)) if not float(v).is_integer() else str(int(v))


def write_annotations(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_COLUMNS)
        for r in records:
            writer.writerow([r.study_id, r.key_slice_id, _fmt(r.box.x1), _fmt(r.box.y1),
                             _fmt(r.box.x2), _fmt(r.box.y2), r.lesion_type.name])


def load_annotations(csv_path):
    """Parse an annotation CSV.  Every bad row is reported, with its line number, in one IngestError."""
    path = Path(csv_path)
    if not path.is_file():
        raise IngestError(f"annotation file not found: {path}")
    records, problems = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ANNOTATION_COLUMNS:
            raise IngestError(f"{path}: header must be {','.join(ANNOTATION_COLUMNS)}, got {header}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(ANNOTATION_COLUMNS):
                problems.append((line, f"expected {len(ANNOTATION_COLUMNS)} fields, got {len(row)}"))
                continue
            try:
                key = int(row[1])
                if key < 0:
                    raise ValueError("key_slice_id must be >= 0")
                box = Box(*(float(v) for v in row[2:6]))
                lesion = LesionType.parse(row[6])
            except (ValueError, KeyError) as exc:
                problems.append((line, str(exc)))
                continue
            records.append(AnnotationRecord(row[0].strip(), key, box, lesion))
    if problems:
        detail = "; ".join(f"line {ln}: {msg}" for ln, msg in problems)
        raise IngestError(f"{path}: {len(problems)} malformed row(s): {detail}", problems)
    return records


def save_dataset(root, phantoms):
    root = Path(root)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    records = []
    for i, (vol, recs) in enumerate(phantoms):
        study = recs[0].study_id if recs else f"phantom_{i:04d}"
        write_volume(root / "volumes" / f"{study}.vol", vol)
        records.extend(recs)
    write_annotations(root / "annotations.csv", records)
    return records


def load_dataset(root, image_size=None, p99=None):
    """Read a dataset directory into normalized samples, one per annotated key slice.

    Returns ``(stacks, p99)``.  ``p99`` is computed over every slice of
    every volume unless given.
    """
    root = Path(root)
    if not (root / "annotations.csv").is_file():
        raise IngestError(f"no dataset at {root} (annotations.csv missing)")
    records = load_annotations(root / "annotations.csv")
    vol_dir = root / "volumes"
    volumes = {p.stem: read_volume(p) for p in sorted(vol_dir.glob("*.vol"))}
    by_key = defaultdict(list)
    for r in records:
        vol = volumes.get(r.study_id)
        if vol is None:
            raise IngestError(f"annotation references missing volume {r.study_id}")
        if r.key_slice_id >= len(vol):
            raise IngestError(f"{r.study_id}: key slice {r.key_slice_id} outside {len(vol)} slices")
        by_key[(r.study_id, r.key_slice_id)].append(r.box)
    if p99 is None:
        if not volumes:
            return [], None
        p99 = dataset_percentile_99([s for v in volumes.values() for s in v])
    stacks = []
    for (study, key), boxes in sorted(by_key.items()):
        norm = [normalize_hu(s, p99) for s in volumes[study]]
        stack = make_slice_stack(norm, key, boxes, key_slice_id=f"{study}:{key}")
        if image_size and stack.pixels.shape[0] != image_size:
            stack = resize_with_boxes(stack, image_size)
        stacks.append(stack)
    return stacks, p99
