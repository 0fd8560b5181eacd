"""Shared phantom datasets and trained models.

Training is the slow part of the suite, so the overfit models are built once
per session and shared by the pipeline, CLI and acceptance tests.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np
import pytest

from neuroscan.classifier import ClassifierSpec, build_classifier
from neuroscan.dataset import Manifest, generate_phantoms, split_manifest
from neuroscan.segmenter import SegmenterSpec, build_segmenter
from neuroscan.training import TrainConfig, train

PHANTOM_SIZE = 64

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def memorization_manifest(m: Manifest) -> Manifest:
    """Train on every record and validate on copies of the same records.

    Used for overfit fixtures: the retained best-validation checkpoint is then
    the one that best fits the training set.
    """
    train_recs = [dataclasses.replace(r, split="train") for r in m.records]
    val_recs = [dataclasses.replace(r, case_id=f"val:{r.case_id}", split="val") for r in m.records]
    return Manifest(records=tuple(train_recs + val_recs), seed=m.seed, split_fractions=(0.5, 0.5, 0.0))


@pytest.fixture(scope="session")
def cls_phantoms(tmp_path_factory):
    out = tmp_path_factory.mktemp("cls_phantoms")
    return generate_phantoms(64, PHANTOM_SIZE, seed=7, out_dir=out)


@pytest.fixture(scope="session")
def seg_phantoms(tmp_path_factory):
    out = tmp_path_factory.mktemp("seg_phantoms")
    m = generate_phantoms(200, PHANTOM_SIZE, seed=11, out_dir=out)
    return split_manifest(m, (0.70, 0.15, 0.15), seed=11)


@pytest.fixture(scope="session")
def trained_classifier(cls_phantoms, tmp_path_factory):
    """tiny_cnn memorizing the 64 classification phantoms (desk preset)."""
    run_dir = tmp_path_factory.mktemp("cls_run")
    model = build_classifier(ClassifierSpec(input_size=(PHANTOM_SIZE, PHANTOM_SIZE)), seed=0)
    initial = {k: v.detach().clone() for k, v in model.backbone.named_parameters()}
    cfg = TrainConfig.preset("classification", "desk", early_stop_patience=40)
    t0 = time.perf_counter()
    model, state, ckpt = train(model, memorization_manifest(cls_phantoms), cfg, run_dir=run_dir)
    elapsed = time.perf_counter() - t0
    return {"model": model, "state": state, "ckpt": ckpt, "run_dir": run_dir,
            "elapsed": elapsed, "initial_backbone": initial, "manifest": cls_phantoms}


@pytest.fixture(scope="session")
def trained_segmenter(seg_phantoms, tmp_path_factory):
    """Residual U-Net (depth 4, base 8) trained on 200 phantoms for 30 epochs."""
    run_dir = tmp_path_factory.mktemp("seg_run")
    spec = SegmenterSpec.scaled(4, 8, input_size=(PHANTOM_SIZE, PHANTOM_SIZE))
    model = build_segmenter(spec, seed=0)
    cfg = TrainConfig.preset("segmentation", "desk")
    t0 = time.perf_counter()
    model, state, ckpt = train(model, seg_phantoms, cfg, run_dir=run_dir)
    elapsed = time.perf_counter() - t0
    return {"model": model, "state": state, "ckpt": ckpt, "run_dir": run_dir,
            "elapsed": elapsed, "manifest": seg_phantoms}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
