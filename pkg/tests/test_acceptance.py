"""Acceptance criteria.  Each test records one PASS/FAIL line, printed in the terminal summary."""

import time

import numpy as np
import torch

from nodule_detect import evaluation as E
from nodule_detect import targets as tg
from nodule_detect.backbone import Backbone, BackboneConfig, PYRAMID_STRIDES
from nodule_detect.data import PhantomConfig, generate_phantoms, load_dataset, save_dataset
from nodule_detect.model import DetectorConfig, NoduleDetector
from nodule_detect.train import TrainConfig, fit, init_parameters, training_loss

import gradcheck
import oracles
from conftest import ACCEPTANCE_RESULTS, random_boxes
from test_backbone import expected_parameter_count


def record(name, ok, detail):
    ACCEPTANCE_RESULTS.append((name, bool(ok), detail))
    assert ok, detail


def test_reported_average_froc():
    rows = {
        "Faster R-CNN": ((55.8, 66.3, 74.7, 81.2, 84.8, 87.5), 75.1),
        "Type I": ((60.9, 71.3, 77.7, 84.2, 87.6, 88.9), 78.4),
        "Type II": ((64.6, 74.1, 80.7, 85.3, 88.3, 89.8), 80.5),
    }
    got = {k: 100 * E.average_froc([s / 100 for s in sens]) for k, (sens, _) in rows.items()}
    ok = all(abs(got[k] - want) <= 0.05 + 1e-9 for k, (_, want) in rows.items())
    record("reported FROC averages", ok, ", ".join(f"{k} {v:.3f} (want {rows[k][1]})" for k, v in got.items()))


def test_froc_oracle_equivalence():
    rng = np.random.default_rng(2024)
    n_cases, mismatches = 25, 0
    for _ in range(n_cases):
        cases = []
        for _ in range(3):
            gts = random_boxes(rng, int(rng.integers(1, 4)), 0, 40, 5, 15)
            dets = np.vstack([gts[rng.integers(len(gts))] + rng.normal(0, 3, 4) for _ in range(2)]
                             + [random_boxes(rng, 1, 0, 50, 3, 15)])
            dets[:, 2:] = np.maximum(dets[:, 2:], dets[:, :2] + 1)
            cases.append((dets, np.round(rng.random(len(dets)), 1), gts))
        curve = E.froc([((d, s), g) for d, s, g in cases])
        th, pts = oracles.froc_points([(d.tolist(), s.tolist(), g.tolist()) for d, s, g in cases])
        if curve.thresholds != th or curve.points != [tuple(p) for p in pts]:
            mismatches += 1
    record("FROC oracle", mismatches == 0, f"{n_cases} three-scan cases, {mismatches} mismatches")


def test_label_assignment_oracles():
    rng = np.random.default_rng(77)
    # 8x8 finest grid: a 16 px image at strides 32..2 (coarsest levels have a single cell)
    anchors = tg.generate_anchors(16, PYRAMID_STRIDES, (32.0, 16.0, 8.0, 4.0, 2.0))
    bad_rpn = bad_cls = 0
    for _ in range(100):
        gts = random_boxes(rng, int(rng.integers(1, 4)), 0, 12, 1, 8)
        got = tg.assign_rpn_labels(anchors, gts).cls.tolist()
        bad_rpn += got != oracles.rpn_labels(anchors.boxes.tolist(), gts.tolist())
        props = np.vstack([gts + rng.normal(0, 1.5, gts.shape) for _ in range(10)])
        props[:, 2:] = np.maximum(props[:, 2:], props[:, :2] + 0.5)
        got = tg.assign_classifier_labels(props, gts).cls.tolist()
        bad_cls += got != oracles.classifier_labels(props.tolist(), gts.tolist())
    record("label assignment oracles", bad_rpn == 0 and bad_cls == 0,
           f"100 gt configs on {len(anchors)} anchors: rpn mismatches {bad_rpn}, classifier mismatches {bad_cls}")


def _probe_detector(decoder):
    cfg = DetectorConfig.micro(decoder, backbone=BackboneConfig.micro(decoder), image_size=32, hidden=16,
                               dropout=0.0)
    model = init_parameters(NoduleDetector(cfg), seed=3).double()
    model = gradcheck.randomize_batchnorm(model, seed=4).eval()
    g = torch.Generator().manual_seed(5)
    images = torch.rand(1, 3, 32, 32, generator=g, dtype=torch.float64)
    gts = [np.array([[6.0, 5.0, 15.0, 13.0], [18.0, 17.0, 27.0, 28.0]])]
    shifts = np.random.default_rng(6).normal(0, 2, size=(8, 4))
    props = [np.clip(np.repeat(gts[0], 4, axis=0) + shifts, 0, 32)]

    def loss():
        # a fresh generator per call keeps the sampled minibatch fixed across probes
        return training_loss(model, images, gts, np.random.default_rng(0), proposals=props).total

    return gradcheck.probe_gradients(model, loss, n_probes=200, seed=7)


def test_gradient_correctness():
    reps = {dt: _probe_detector(dt) for dt in ("type1", "type2")}
    ok = all(len(r.rel_err) >= 200 and r.max_rel_err < 1e-4 for r in reps.values())
    record("gradient check", ok, "; ".join(
        f"{dt}: {len(r.rel_err)} probes, max rel err {r.max_rel_err:.2e}, {r.rejected} kink probes redrawn"
        for dt, r in reps.items()))


def test_shape_invariants():
    problems = []
    for decoder in ("type1", "type2"):
        for size in (64, 128, 512):
            cfg = BackboneConfig(decoder_type=decoder) if size == 512 else BackboneConfig.micro(decoder)
            with torch.no_grad():
                pyr = Backbone(cfg).eval()(torch.zeros(1, 3, size, size))
            if pyr.strides != (32, 16, 8, 4, 2) or len(pyr.levels) != 5:
                problems.append(f"{decoder}@{size}: strides {pyr.strides}")
            for lvl, s in zip(pyr.levels, pyr.strides):
                if tuple(lvl.shape) != (1, cfg.pyramid_channels, size // s, size // s):
                    problems.append(f"{decoder}@{size}: level {tuple(lvl.shape)}")
    n_anchors = len(tg.generate_anchors(512))
    ok = not problems and n_anchors == 261_888
    record("shape invariants", ok, f"anchors at 512: {n_anchors}; problems: {problems or 'none'}")


def test_box_codec_identity():
    rng = np.random.default_rng(99)
    ref = random_boxes(rng, 10_000, 0, 500, 1, 200)
    gt = random_boxes(rng, 10_000, 0, 500, 1, 200)
    err = np.abs(tg.decode_box(ref, tg.encode_box(ref, gt)) - gt).max()
    record("box codec identity", err <= 1e-9, f"max abs error {err:.2e} over 1e4 pairs")


def test_end_to_end_smoke(tmp_path):
    root = tmp_path / "phantoms"
    save_dataset(root, generate_phantoms(PhantomConfig(n_volumes=32, image_size=64,
                                                       nodule_radius_px=(3.0, 7.0), seed=7)))
    samples, _ = load_dataset(root)
    t0 = time.time()
    res = fit(samples, DetectorConfig.micro("type2"), TrainConfig(epochs=30, lr_drop_epoch=20, seed=0))
    first, last = res.history[0]["total"], res.history[-1]["total"]
    per_scan = []
    for s in samples:
        d = res.model.detect(torch.as_tensor(s.pixels.transpose(2, 0, 1)))[0]
        per_scan.append(((d.boxes, d.scores), s.box_array))
    curve = E.froc(per_scan)
    drop = 1 - last / first
    ok = drop >= 0.5 and curve.sens_at[4.0] >= 0.9
    record("end-to-end smoke", ok,
           f"{len(samples)} samples, loss {first:.3f} -> {last:.3f} ({100 * drop:.0f}% drop), "
           f"sensitivity at 4 FPs {curve.sens_at[4.0]:.3f}, {time.time() - t0:.0f}s")


def test_type2_more_parameters_than_type1():
    counts = {}
    for dt in ("type1", "type2"):
        cfg = BackboneConfig(decoder_type=dt)
        counts[dt] = expected_parameter_count(cfg)
        assert sum(p.numel() for p in Backbone(cfg).parameters()) == counts[dt]
    record("type II > type I parameters", counts["type2"] > counts["type1"],
           f"type1 {counts['type1']:,}, type2 {counts['type2']:,}")
