import csv
import hashlib
import json

import pytest

from nodule_detect import cli

SMALL = {"phantom": {"nodule_radius_px": [3, 7]}}


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _resolved(out):
    text = out.split("resolved config:\n", 1)[1]
    return json.JSONDecoder().raw_decode(text)[0]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write(root / "small.json", {**SMALL, "preset": "micro"})
    assert cli.main(["generate", "--config", cfg, "--out", str(root / "ds"), "--n-volumes", "3",
                     "--image-size", "64", "--seed", "5"]) == 0
    assert cli.main(["train", "--config", cfg, "--data", str(root / "ds"), "--decoder", "type2",
                     "--epochs", "2", "--out", str(root / "run")]) == 0
    return root, cfg


# -- generate ----------------------------------------------------------------------

def test_generate_reproducible(tmp_path, capsys):
    cfg = _write(tmp_path / "c.json", SMALL)
    for name in ("a", "b"):
        assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / name), "--n-volumes", "2",
                         "--image-size", "64", "--seed", "11"]) == 0
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_generate_zero_volumes(tmp_path, capsys):
    assert cli.main(["generate", "--out", str(tmp_path / "d"), "--n-volumes", "0"]) == 0
    assert (tmp_path / "d" / "annotations.csv").read_text().strip().count("\n") == 0
    assert "wrote 0 volumes and 0 annotations" in capsys.readouterr().out


def test_generate_summary_matches_csv(workspace, capsys):
    root, cfg = workspace
    with open(root / "ds" / "annotations.csv") as fh:
        n_rows = len(list(csv.reader(fh))) - 1
    assert cli.main(["generate", "--config", cfg, "--out", str(root / "ds2"), "--n-volumes", "3",
                     "--image-size", "64", "--seed", "5"]) == 0
    assert f"wrote 3 volumes and {n_rows} annotations" in capsys.readouterr().out


def test_generate_refuses_nonempty_without_force(tmp_path, capsys):
    out = tmp_path / "d"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert cli.main(["generate", "--out", str(out), "--n-volumes", "0"]) == 1
    assert "--force" in capsys.readouterr().err
    assert cli.main(["generate", "--out", str(out), "--n-volumes", "0", "--force"]) == 0
    assert (out / "keep.txt").exists()


# -- config handling ---------------------------------------------------------------

def test_train_defaults_echoed(tmp_path, capsys):
    # no dataset: the run fails after the config is printed
    assert cli.main(["train", "--decoder", "type1", "--data", str(tmp_path / "none")]) == 1
    resolved = _resolved(capsys.readouterr().out)
    assert resolved["train"]["learning_rate"] == 1e-3
    assert resolved["train"]["weight_decay"] == 1e-4
    assert resolved["train"]["epochs"] == 15
    assert resolved["detector"]["backbone"]["decoder_type"] == "type1"


def test_train_requires_decoder(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path)]) == 1
    assert "decoder" in capsys.readouterr().err


def test_flags_override_file(tmp_path, capsys):
    cfg = _write(tmp_path / "c.json", {"train": {"epochs": 3, "batch_size": 4}})
    cli.main(["train", "--config", cfg, "--decoder", "type2", "--epochs", "7", "--data", str(tmp_path / "x")])
    resolved = _resolved(capsys.readouterr().out)
    assert resolved["train"]["epochs"] == 7 and resolved["train"]["batch_size"] == 4


@pytest.mark.parametrize("bad", [{"bogus": 1}, {"train": {"lr": 0.1}}, {"detector": {"backbone": {"width": 3}}},
                                 {"eval": {"iou": 0.5}}, {"preset": "huge"}])
def test_unknown_config_keys_rejected(tmp_path, capsys, bad):
    cfg = _write(tmp_path / "c.json", bad)
    assert cli.main(["train", "--config", cfg, "--decoder", "type2"]) == 1
    assert "error:" in capsys.readouterr().err


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--epochs", "many"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2


def test_device_other_than_cpu_rejected(tmp_path, capsys):
    assert cli.main(["train", "--decoder", "type2", "--device", "cuda", "--data", str(tmp_path)]) == 1


# -- train -------------------------------------------------------------------------

def test_train_artifacts(workspace):
    root, _ = workspace
    ckpts = sorted((root / "run" / "checkpoints").glob("*.pt"))
    assert [p.name for p in ckpts] == ["epoch_001.pt", "epoch_002.pt"]
    manifest = json.loads((root / "run" / "manifest.json").read_text())
    assert manifest["detector"]["backbone"]["decoder_type"] == "type2"
    assert manifest["meta"]["p99"] > 0
    with open(root / "run" / "train_log.csv") as fh:
        assert len(list(csv.reader(fh))) == 3


# -- eval --------------------------------------------------------------------------

def _perfect_detections(ds, path):
    with open(ds / "annotations.csv") as fh, open(path, "w", newline="") as out:
        w = csv.writer(out)
        w.writerow(cli.DETECTION_COLUMNS)
        for row in csv.DictReader(fh):
            w.writerow([f"{row['study_id']}:{row['key_slice_id']}", row["x1"], row["y1"], row["x2"], row["y2"], 0.9])


def test_eval_detections_file_perfect(workspace, tmp_path, capsys):
    root, _ = workspace
    _perfect_detections(root / "ds", tmp_path / "dets.csv")
    assert cli.main(["eval", "--data", str(root / "ds"), "--detections-file", str(tmp_path / "dets.csv"),
                     "--out", str(tmp_path / "ev")]) == 0
    summary = json.loads((tmp_path / "ev" / "summary.json").read_text())
    assert summary["average_froc"] == 1.0
    table = capsys.readouterr().out.strip().splitlines()[-4:]
    assert table[0].split() == ["Model", "0.5", "1", "2", "4", "8", "16", "Avg"]
    assert table[2].split()[1:] == ["100.0"] * 7


def test_eval_detections_file_malformed(workspace, tmp_path, capsys):
    root, _ = workspace
    (tmp_path / "bad.csv").write_text("image_id,x1,y1,x2,y2,confidence\nphantom_0000:2,1,1,0,5,0.5\n")
    assert cli.main(["eval", "--data", str(root / "ds"), "--detections-file", str(tmp_path / "bad.csv"),
                     "--out", str(tmp_path / "ev")]) == 1
    assert "line 2" in capsys.readouterr().err


def test_eval_checkpoint(workspace, tmp_path, capsys):
    root, cfg = workspace
    ckpt = str(root / "run" / "checkpoints" / "epoch_002.pt")
    assert cli.main(["eval", "--config", cfg, "--checkpoint", ckpt, "--data", str(root / "ds"),
                     "--out", str(tmp_path / "ev")]) == 0
    out = capsys.readouterr().out
    assert {"froc.csv", "summary.json", "froc.png", "detections.csv"} <= {p.name for p in (tmp_path / "ev").iterdir()}
    header = [ln for ln in out.splitlines() if ln.startswith("Model")][0]
    assert header.split()[1:] == ["0.5", "1", "2", "4", "8", "16", "Avg"]


def test_eval_decoder_mismatch(workspace, tmp_path, capsys):
    root, _ = workspace
    ckpt = str(root / "run" / "checkpoints" / "epoch_002.pt")
    assert cli.main(["eval", "--checkpoint", ckpt, "--decoder", "type1", "--data", str(root / "ds"),
                     "--out", str(tmp_path / "ev")]) == 1
    assert "decoder" in capsys.readouterr().err


def test_eval_config_mismatch(workspace, tmp_path, capsys):
    root, _ = workspace
    other = _write(tmp_path / "o.json", {"preset": "micro", "detector": {"hidden": 32}})
    ckpt = str(root / "run" / "checkpoints" / "epoch_002.pt")
    assert cli.main(["eval", "--config", other, "--checkpoint", ckpt, "--data", str(root / "ds"),
                     "--out", str(tmp_path / "ev")]) == 1
    assert "hidden" in capsys.readouterr().err


def test_eval_missing_checkpoint(workspace, tmp_path, capsys):
    root, _ = workspace
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "nope.pt"), "--data", str(root / "ds")]) == 1


# -- predict -----------------------------------------------------------------------

def test_predict_dataset_and_volume(workspace, tmp_path, capsys):
    root, _ = workspace
    ckpt = str(root / "run" / "checkpoints" / "epoch_002.pt")
    assert cli.main(["predict", "--checkpoint", ckpt, "--out", str(tmp_path / "p1"), str(root / "ds")]) == 0
    with open(tmp_path / "p1" / "detections.csv") as fh:
        assert next(csv.reader(fh)) == cli.DETECTION_COLUMNS
    n_keys = len({(r["study_id"], r["key_slice_id"]) for r in csv.DictReader(open(root / "ds" / "annotations.csv"))})
    assert len(list((tmp_path / "p1" / "overlays").glob("*.png"))) == n_keys

    vol = sorted((root / "ds" / "volumes").glob("*.vol"))[0]
    assert cli.main(["predict", "--checkpoint", ckpt, "--out", str(tmp_path / "p2"), str(vol)]) == 0
    assert len(list((tmp_path / "p2" / "overlays").glob("*.png"))) == 5


def test_predict_unreadable_input(workspace, tmp_path, capsys):
    root, _ = workspace
    ckpt = str(root / "run" / "checkpoints" / "epoch_002.pt")
    (tmp_path / "junk.vol").write_bytes(b"not a volume")
    assert cli.main(["predict", "--checkpoint", ckpt, "--out", str(tmp_path / "p"), str(tmp_path / "junk.vol")]) == 1
    assert cli.main(["predict", "--checkpoint", ckpt, "--out", str(tmp_path / "p"), str(tmp_path / "absent")]) == 1


def test_read_detections_round_trip(tmp_path):
    rows = [("a:1", (1.0, 2.0, 3.5, 4.0), 0.25), ("a:1", (5.0, 5.0, 9.0, 9.0), 0.5), ("b:0", (0, 0, 1, 1), 1.0)]
    cli._write_detections(tmp_path / "d.csv", rows)
    got = cli.read_detections(tmp_path / "d.csv")
    assert got["a:1"][0].tolist() == [[1.0, 2.0, 3.5, 4.0], [5.0, 5.0, 9.0, 9.0]]
    assert got["a:1"][1].tolist() == [0.25, 0.5] and got["b:0"][1].tolist() == [1.0]
