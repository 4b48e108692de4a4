import hashlib
import json

import numpy as np
import pytest

from ctpji import cohort_cv as cc
from ctpji import metrics as mx
from ctpji import phantom_synth as ps
from ctpji.cli import main
from ctpji.contour_patch import decode_pgm, read_sidecar
from ctpji.dicom_lite import RawSlice, SliceMeta, write_dicom_lite


def dir_digest(root):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def run_synth(out, aseptic=1, infected=1, seed=3, size=96, min_slices=4, max_slices=6):
    return main(
        [
            "synth",
            "--aseptic", str(aseptic),
            "--infected", str(infected),
            "--seed", str(seed),
            "--out", str(out),
            "--image-size", str(size),
            "--min-slices", str(min_slices),
            "--max-slices", str(max_slices),
        ]
    )


# ---------------------------------------------------------------------------
# synth


def test_synth_writes_patient_dirs(tmp_path):
    out = tmp_path / "data"
    assert run_synth(out, aseptic=2, infected=1) == 0
    dirs = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert dirs == ["aseptic-001", "aseptic-002", "infected-001"]
    assert (out / "manifest.json").is_file()


def test_synth_negative_count_usage_error(tmp_path):
    code = main(["synth", "--aseptic", "-1", "--infected", "2", "--out", str(tmp_path)])
    assert code == 2


def test_synth_rerun_byte_identical(tmp_path):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert run_synth(out1) == 0
    assert run_synth(out2) == 0
    assert dir_digest(out1) == dir_digest(out2)


# ---------------------------------------------------------------------------
# prep


def test_prep_extracts_expected_patches(tmp_path):
    data = tmp_path / "data"
    out = tmp_path / "patches"
    assert run_synth(data, aseptic=1, infected=1, size=128, min_slices=6, max_slices=8) == 0
    assert main(["prep", "--input", str(data), "--out", str(out), "--jobs", "1"]) == 0

    manifest = cc.load_manifest(data / "manifest.json")
    for record in manifest.patients:
        truth = json.loads((data / record.patient_id / "ground_truth.json").read_text())
        expected = list(range(truth["implant_first"], truth["implant_last"] + 1))
        sidecar = read_sidecar(out / f"{record.patient_id}.json")
        assert [e["instance_number"] for e in sidecar["patches"]] == expected
        for entry in sidecar["patches"]:
            pgm = out / entry["file"]
            assert pgm.is_file()
            grid = decode_pgm(pgm.read_bytes())
            assert grid.shape == (188, 188)


def test_prep_missing_input_dir(tmp_path):
    assert main(["prep", "--input", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2


def test_prep_empty_input_dir(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["prep", "--input", str(empty), "--out", str(tmp_path / "o")]) == 2


def test_prep_corrupt_file_exit_1(tmp_path, capsys):
    data = tmp_path / "data"
    assert run_synth(data, aseptic=1, infected=0) == 0
    bad = data / "aseptic-001" / "3.dcm"
    bad.write_bytes(b"\x00" * 40)
    code = main(["prep", "--input", str(data), "--out", str(tmp_path / "o"), "--jobs", "1"])
    assert code == 1
    assert "3.dcm" in capsys.readouterr().err


def test_prep_patient_without_implant_warns_and_skips(tmp_path, capsys):
    data = tmp_path / "data" / "pat-x"
    data.mkdir(parents=True)
    for inst in (1, 2):
        meta = SliceMeta("pat-x", inst, 32, 32, 1.0, -1024.0, 16, 0)
        slc = RawSlice(meta, np.full((32, 32), 1024, dtype=np.int32))  # 0 HU
        (data / f"{inst}.dcm").write_bytes(write_dicom_lite(slc))
    out = tmp_path / "o"
    code = main(["prep", "--input", str(tmp_path / "data"), "--out", str(out), "--jobs", "1"])
    assert code == 0
    assert "no implant" in capsys.readouterr().err
    assert not list(out.glob("*.pgm"))


def test_prep_rerun_byte_identical(tmp_path):
    data = tmp_path / "data"
    assert run_synth(data, aseptic=1, infected=1, size=128) == 0
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert main(["prep", "--input", str(data), "--out", str(out1), "--jobs", "1"]) == 0
    assert main(["prep", "--input", str(data), "--out", str(out2), "--jobs", "2"]) == 0
    # sidecars embed absolute source paths; compare patch bytes instead
    pgms1 = sorted(p.name for p in out1.glob("*.pgm"))
    pgms2 = sorted(p.name for p in out2.glob("*.pgm"))
    assert pgms1 == pgms2
    for name in pgms1:
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


# ---------------------------------------------------------------------------
# split


def write_synthetic_manifest(path, n_aseptic=50, n_infected=52):
    doc = {
        "patients": [
            {"id": f"a{k:03d}", "label": "aseptic", "slices": []}
            for k in range(n_aseptic)
        ]
        + [
            {"id": f"i{k:03d}", "label": "infected", "slices": []}
            for k in range(n_infected)
        ]
    }
    path.write_text(json.dumps(doc))


def test_split_writes_expected_sizes(tmp_path):
    mpath = tmp_path / "m.json"
    write_synthetic_manifest(mpath)
    spath = tmp_path / "splits.json"
    assert main(["split", "--manifest", str(mpath), "--seed", "3", "--out", str(spath)]) == 0
    splits = cc.load_splits(spath)
    assert len(splits.d_x) == 12
    assert len(splits.d_t) == 42
    assert splits.seed == 3


def test_split_missing_manifest(tmp_path):
    assert main(["split", "--manifest", str(tmp_path / "nope.json"), "--seed", "1"]) == 2


def test_split_insufficient_cohort(tmp_path):
    mpath = tmp_path / "m.json"
    write_synthetic_manifest(mpath, n_aseptic=10, n_infected=52)
    assert main(["split", "--manifest", str(mpath), "--seed", "1"]) == 1


def test_split_stdout(tmp_path, capsys):
    mpath = tmp_path / "m.json"
    write_synthetic_manifest(mpath)
    assert main(["split", "--manifest", str(mpath), "--seed", "9"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["d_v"]) == 4


# ---------------------------------------------------------------------------
# metrics


def metrics_fixture(tmp_path):
    mpath = tmp_path / "m.json"
    write_synthetic_manifest(mpath)
    spath = tmp_path / "splits.json"
    assert main(["split", "--manifest", str(mpath), "--seed", "3", "--out", str(spath)]) == 0
    splits = cc.load_splits(spath)
    manifest = cc.load_manifest(mpath)
    labels = manifest.labels
    preds = []
    for pid in splits.d_x:
        prob = 0.8 if labels[pid] == "infected" else 0.2
        preds.extend(mx.SlicePrediction(pid, k, prob) for k in range(1, 11))
    cpath = tmp_path / "preds.csv"
    mx.write_predictions_csv(preds, cpath)
    return mpath, spath, cpath


def test_metrics_report(tmp_path, capsys):
    mpath, spath, cpath = metrics_fixture(tmp_path)
    jpath = tmp_path / "report.json"
    code = main(
        [
            "metrics",
            "--preds", str(cpath),
            "--splits", str(spath),
            "--manifest", str(mpath),
            "--config", "1",
            "--json-out", str(jpath),
        ]
    )
    assert code == 0
    out_lines = capsys.readouterr().out.splitlines()
    assert len(out_lines) == 14  # header + rule + 12 rows
    doc = json.loads(jpath.read_text())
    assert len(doc["patients"]) == 12
    for p in doc["patients"]:
        assert p["results"]["1"]["accuracy"] == 1.0
        assert p["results"]["1"]["aggregated_class"] == p["label"]


def test_metrics_missing_file(tmp_path):
    mpath, spath, cpath = metrics_fixture(tmp_path)
    code = main(
        [
            "metrics",
            "--preds", str(tmp_path / "nope.csv"),
            "--splits", str(spath),
            "--manifest", str(mpath),
        ]
    )
    assert code == 2


def test_metrics_incomplete_predictions(tmp_path):
    mpath, spath, cpath = metrics_fixture(tmp_path)
    splits = cc.load_splits(spath)
    preds = mx.read_predictions_csv(cpath)
    preds = [p for p in preds if p.patient_id != splits.d_x[0]]
    mx.write_predictions_csv(preds, cpath)
    code = main(
        ["metrics", "--preds", str(cpath), "--splits", str(spath), "--manifest", str(mpath)]
    )
    assert code == 1


def test_usage_error_no_command():
    assert main([]) == 2


def test_usage_error_unknown_flag(tmp_path):
    assert main(["synth", "--bogus", "1"]) == 2
