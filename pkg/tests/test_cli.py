import json
import subprocess
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from neuroscan import cli
from neuroscan.classifier import load_classifier
from neuroscan.dataset import LABELS, Manifest, write_png
from neuroscan.pipeline import CASE_RESULT_SCHEMA, evaluate_suite
from neuroscan.segmenter import load_segmenter


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ph"
    assert cli.main(["phantoms", "--n", "64", "--size", "64", "--seed", "7", "--out", str(out)]) == 0
    return out


# ------------------------------------------------------------------ phantoms


def test_phantoms_layout_and_class_mix(phantom_dir):
    images = sorted((phantom_dir / "images").glob("*.png"))
    masks = sorted((phantom_dir / "masks").glob("*.png"))
    assert len(images) == 64 and len(masks) == 64
    # count files per class from their names
    for lab in LABELS:
        assert abs(sum(p.stem.endswith(lab) for p in images) - 64 * 0.25) <= 1
    m = Manifest.from_json(phantom_dir / "manifest.json")
    assert len(m) == 64 and m.seed == 7
    assert [len(m.split(s)) for s in ("train", "val", "test")] == [44, 9, 11]


def test_phantoms_rerun_is_identical(phantom_dir, tmp_path, capsys):
    code, _, _ = run(["phantoms", "--n", 64, "--size", 64, "--seed", 7, "--out", tmp_path / "ph"], capsys)
    assert code == 0
    for sub in ("images", "masks"):
        for p in (phantom_dir / sub).glob("*.png"):
            assert p.read_bytes() == (tmp_path / "ph" / sub / p.name).read_bytes()
    a = json.loads((phantom_dir / "manifest.json").read_text())
    b = json.loads((tmp_path / "ph" / "manifest.json").read_text())
    assert [(r["case_id"], r["split"], r["label"]) for r in a["records"]] == \
        [(r["case_id"], r["split"], r["label"]) for r in b["records"]]


def test_phantoms_uneven_mix(tmp_path, capsys):
    code, out, _ = run(["phantoms", "--n", 10, "--size", 32, "--mix", "1,2,3,4", "--out", tmp_path], capsys)
    assert code == 0
    counts = json.loads(out)["counts"]
    totals = [sum(counts[s][lab] for s in counts) for lab in LABELS]
    assert totals == [1, 2, 3, 4]


# ------------------------------------------------------------------- prepare


def _class_tree(root):
    for lab in LABELS:
        for i in range(5):
            write_png(root / lab / f"{lab}{i}.png", np.full((8, 8), i * 40 + LABELS.index(lab), np.uint8))


def test_prepare_happy_path_and_rerun(tmp_path, capsys):
    _class_tree(tmp_path / "data")
    args = ["prepare", "--root", tmp_path / "data", "--split", "0.7,0.15,0.15", "--seed", 42]
    code, out, _ = run(args + ["--out", tmp_path / "a.json"], capsys)
    assert code == 0 and json.loads(out)["records"] == 20
    run(args + ["--out", tmp_path / "b.json"], capsys)
    a = json.loads((tmp_path / "a.json").read_text())
    b = json.loads((tmp_path / "b.json").read_text())
    a.pop("created_at"), b.pop("created_at")
    assert a == b


def test_prepare_bad_fractions_exit_2(tmp_path, capsys):
    _class_tree(tmp_path / "data")
    code, _, err = run(["prepare", "--root", tmp_path / "data", "--split", "0.5,0.5,0.5"], capsys)
    assert code == 2
    assert "sum to 1" in err
    code, _, err = run(["prepare", "--root", tmp_path / "nothing"], capsys)
    assert code == 2 and "does not exist" in err


def test_argparse_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--task", "regression"])
    assert exc.value.code == 2


# --------------------------------------------------------------------- train


def _print_config(capsys, *extra):
    code, out, _ = run(["train", "--print-config", *extra], capsys)
    assert code == 0
    return json.loads(out)


def test_paper_presets_resolve_to_table_values(capsys):
    c = _print_config(capsys, "--task", "classification", "--preset", "paper")["train"]
    assert (c["learning_rate"], c["batch_size"], c["dropout_rate"], c["epochs"]) == (0.001, 32, 0.4, 50)
    s = _print_config(capsys, "--task", "segmentation", "--preset", "paper")["train"]
    assert (s["learning_rate"], s["weight_decay"]) == (0.0001, 0.0001)


def test_config_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"train": {"epochs": 7, "batch_size": 8}, "model": {"hidden_units": 256}}))
    r = _print_config(capsys, "--task", "classification", "--config", cfg, "--epochs", "3")
    assert r["train"]["epochs"] == 3  # flag beats file
    assert r["train"]["batch_size"] == 8  # file beats preset
    assert r["train"]["learning_rate"] == 0.001  # preset default
    assert r["model"]["hidden_units"] == 256
    assert r["sources"] == ["preset:paper", f"file:{cfg}", "flags"]


def test_invalid_config_values_exit_2(tmp_path, capsys):
    code, _, err = run(["train", "--task", "classification", "--print-config", "--lr", "-1"], capsys)
    assert code == 2 and "learning_rate" in err
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = run(["train", "--task", "classification", "--config", bad, "--print-config"], capsys)
    assert code == 2


def test_train_missing_manifest_exit_2(tmp_path, capsys):
    code, _, err = run(["train", "--task", "classification", "--manifest", tmp_path / "none.json",
                        "--run-dir", tmp_path / "r"], capsys)
    assert code == 2 and "not found" in err


def test_one_epoch_smoke_under_a_minute(phantom_dir, tmp_path, capsys):
    t0 = time.perf_counter()
    code, out, _ = run(["train", "--task", "segmentation", "--preset", "desk", "--manifest",
                        phantom_dir / "manifest.json", "--input-size", 64, "--depth", 2, "--base-filters", 8,
                        "--epochs", 1, "--run-dir", tmp_path / "run"], capsys)
    elapsed = time.perf_counter() - t0
    assert code == 0 and elapsed < 60
    run_dir = tmp_path / "run"
    for p in ("config.json", "history.json", "checkpoints/best/params.pt", "figures/history.png"):
        assert (run_dir / p).exists(), p
    config = json.loads((run_dir / "config.json").read_text())
    assert config["run"]["model"]["depth"] == 2 and config["train"]["epochs"] == 1
    assert json.loads(out)["epochs_completed"] == 1


def test_run_dir_from_environment(phantom_dir, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("NEUROSCAN_RUN_DIR", str(tmp_path / "envrun"))
    code, _, _ = run(["train", "--task", "classification", "--preset", "desk", "--manifest",
                      phantom_dir / "manifest.json", "--input-size", 64, "--epochs", 1], capsys)
    assert code == 0
    assert (tmp_path / "envrun" / "checkpoints" / "best" / "meta.json").exists()


# ------------------------------------------------------- evaluate / predict


def test_evaluate_matches_library(trained_classifier, trained_segmenter, tmp_path, capsys):
    manifest = tmp_path / "m.json"
    trained_segmenter["manifest"].to_json(manifest)
    code, _, _ = run(["evaluate", "--classifier", trained_classifier["run_dir"], "--segmenter",
                      trained_segmenter["ckpt"], "--manifest", manifest, "--out", tmp_path / "cli"], capsys)
    assert code == 0
    evaluate_suite(load_classifier(trained_classifier["ckpt"]), load_segmenter(trained_segmenter["ckpt"]),
                   Manifest.from_json(manifest), "test", out_dir=tmp_path / "lib")
    for f in ("report.json", "cases.csv"):
        assert (tmp_path / "cli" / f).read_bytes() == (tmp_path / "lib" / f).read_bytes()
    assert any((tmp_path / "cli" / "overlays").iterdir())

    code, out, _ = run(["report", "--run-dir", trained_classifier["run_dir"], "--report",
                        tmp_path / "cli" / "report.json"], capsys)
    assert code == 0 and len(json.loads(out)["figures"]) == 3


def test_evaluate_missing_checkpoint_exit_2(trained_segmenter, tmp_path, capsys):
    code, _, err = run(["evaluate", "--classifier", tmp_path / "nope", "--segmenter", trained_segmenter["ckpt"],
                        "--manifest", tmp_path / "m.json"], capsys)
    assert code == 2 and "no classifier checkpoint" in err


def test_evaluate_resolution_mismatch_exit_2(trained_classifier, trained_segmenter, tmp_path, capsys):
    code, _, err = run(["evaluate", "--classifier", trained_classifier["ckpt"], "--segmenter",
                        trained_segmenter["ckpt"], "--manifest", tmp_path / "m.json",
                        "--segmenter-size", "256"], capsys)
    assert code == 2 and "expects input" in err


def _predict(trained_classifier, trained_segmenter, image, out, capsys, *extra):
    code, stdout, _ = run(["predict", "--classifier", trained_classifier["ckpt"], "--segmenter",
                           trained_segmenter["ckpt"], "--image", image, "--out", out, *extra], capsys)
    assert code == 0
    doc = json.loads(stdout)
    jsonschema.validate(doc, CASE_RESULT_SCHEMA)
    return doc


def test_predict_tumor_and_no_tumor(trained_classifier, trained_segmenter, tmp_path, capsys):
    recs = trained_classifier["manifest"].records
    tumor = next(r for r in recs if r.label == "pituitary")
    doc = _predict(trained_classifier, trained_segmenter, tumor.image_ref, tmp_path, capsys, "--truth", tumor.mask_ref)
    assert set(doc["class_probs"]) == set(LABELS)
    assert abs(sum(doc["class_probs"].values()) - 1) < 1e-6
    assert doc["predicted_label"] == "pituitary"
    assert Path(doc["mask_ref"]).exists() and Path(doc["overlay_ref"]).exists()
    assert doc["seg_scores"]["dice"] >= 0.9

    healthy = next(r for r in recs if r.label == "no_tumor")
    doc = _predict(trained_classifier, trained_segmenter, healthy.image_ref, tmp_path, capsys)
    assert doc["predicted_label"] == "no_tumor"
    assert "mask_ref" not in doc and "mask_pixels" not in doc


def test_predict_bad_threshold_exit_2(trained_classifier, trained_segmenter, tmp_path, capsys):
    img = trained_classifier["manifest"].records[0].image_ref
    code, _, err = run(["predict", "--classifier", trained_classifier["ckpt"], "--segmenter",
                        trained_segmenter["ckpt"], "--image", img, "--threshold", "1.5"], capsys)
    assert code == 2 and "threshold" in err


def test_internal_error_exit_1(monkeypatch, tmp_path, capsys):
    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "generate_phantoms", boom)
    code, _, err = run(["phantoms", "--out", tmp_path], capsys)
    assert code == 1 and "disk on fire" in err


def test_console_script_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "neuroscan", "phantoms", "--n", "4", "--size", "32",
                         "--split", "0.5,0.25,0.25", "--out", str(tmp_path)], capture_output=True, text=True)
    assert ok.returncode == 0, ok.stderr
    bad = subprocess.run([sys.executable, "-m", "neuroscan", "phantoms", "--split", "1,1,1"],
                         capture_output=True, text=True)
    assert bad.returncode == 2 and "sum to 1" in bad.stderr
