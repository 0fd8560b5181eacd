"""Classification-then-segmentation integration and suite evaluation.

``evaluate_suite`` writes, under its output directory::

    report.json              EvaluationReport
    cases.csv                one row per case
    overlays/<case>.png      predicted (red) / true (green) contours
    figures/*.png            confusion matrix and score histogram
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from neuroscan import metrics, plotting
from neuroscan.classifier import ClassProbabilities, TumorClassifier, predict_class
from neuroscan.dataset import LABELS, Manifest, read_image, read_mask
from neuroscan.preprocess import normalize, resize
from neuroscan.segmenter import ResUNet, SegmentationMask, predict_mask

PRED_COLOR = (255, 0, 0)
TRUTH_COLOR = (0, 255, 0)
BOTH_COLOR = (255, 255, 0)

# JSON schema of a single case result as printed by ``neuroscan predict``.
CASE_RESULT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["case_id", "class_probs", "predicted_label"],
    "properties": {
        "case_id": {"type": "string"},
        "class_probs": {
            "type": "object",
            "required": list(LABELS),
            "properties": {lab: {"type": "number", "minimum": 0, "maximum": 1} for lab in LABELS},
            "additionalProperties": False,
        },
        "predicted_label": {"enum": list(LABELS)},
        "true_label": {"enum": list(LABELS)},
        "mask_ref": {"type": "string"},
        "mask_pixels": {"type": "integer", "minimum": 0},
        "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "overlay_ref": {"type": "string"},
        "seg_scores": {
            "type": "object",
            "required": ["dice", "iou", "hausdorff"],
            "properties": {
                "dice": {"type": "number", "minimum": 0, "maximum": 1},
                "iou": {"type": "number", "minimum": 0, "maximum": 1},
                "hausdorff": {"type": ["number", "null"], "minimum": 0},
            },
        },
    },
    "additionalProperties": False,
}


@dataclass
class CaseResult:
    case_id: str
    class_probs: ClassProbabilities
    predicted_label: str
    mask: SegmentationMask | None = None
    seg_scores: metrics.SegScores | None = None
    overlay_ref: str | None = None
    true_label: str | None = None
    mask_ref: str | None = None

    def to_dict(self) -> dict:
        out: dict = {
            "case_id": self.case_id,
            "class_probs": self.class_probs.to_dict(),
            "predicted_label": self.predicted_label,
        }
        if self.true_label is not None:
            out["true_label"] = self.true_label
        if self.mask is not None:
            out["mask_pixels"] = int(self.mask.pixels.sum())
            out["threshold"] = self.mask.threshold_used
        if self.mask_ref is not None:
            out["mask_ref"] = self.mask_ref
        if self.seg_scores is not None:
            out["seg_scores"] = self.seg_scores.to_dict()
        if self.overlay_ref is not None:
            out["overlay_ref"] = self.overlay_ref
        return out


def check_resolutions(classifier: TumorClassifier, segmenter: ResUNet, expected: dict | None = None) -> None:
    """Fail early when model sidecars disagree with the configured input sizes."""
    for name, model in (("classifier", classifier), ("segmenter", segmenter)):
        want = (expected or {}).get(name)
        if want is not None and tuple(want) != tuple(model.input_size):
            raise ValueError(
                f"{name} checkpoint expects input {tuple(model.input_size)}, config says {tuple(want)}"
            )


def run_case(
    classifier: TumorClassifier,
    segmenter: ResUNet,
    img: np.ndarray,
    gate: bool = True,
    threshold: float = 0.5,
    case_id: str = "",
    truth: np.ndarray | None = None,
    true_label: str | None = None,
) -> CaseResult:
    """Classify ``img`` (normalized, any size) and segment it unless gated off.

    With ``gate`` the segmenter only runs when the predicted class is a tumor.
    Masks come back at the resolution of ``img``.
    """
    img = np.asarray(img, dtype=np.float32)
    probs = predict_class(classifier, resize(img, classifier.input_size))
    label = probs.label
    mask = scores = None
    if not gate or label != "no_tumor":
        small = predict_mask(segmenter, resize(img, segmenter.input_size), threshold)
        mask = SegmentationMask(resize(small.pixels, img.shape, is_mask=True), small.threshold_used)
        if truth is not None:
            scores = metrics.seg_scores(mask.pixels, np.asarray(truth))
    return CaseResult(
        case_id=case_id,
        class_probs=probs,
        predicted_label=label,
        mask=mask,
        seg_scores=scores,
        true_label=true_label,
    )


def _contour(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    return m & ~ndimage.binary_erosion(m, border_value=0)


def render_overlay(
    img: np.ndarray,
    mask: np.ndarray | SegmentationMask,
    truth: np.ndarray | None = None,
    path: str | Path | None = None,
) -> np.ndarray:
    """RGB uint8 rendering: grayscale base, predicted contour red, truth green."""
    img = np.asarray(img, dtype=np.float64)
    pred = mask.pixels if isinstance(mask, SegmentationMask) else np.asarray(mask)
    if pred.shape != img.shape or (truth is not None and np.shape(truth) != img.shape):
        raise ValueError("image, mask and truth must have identical shapes")
    gray = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    pc = _contour(pred)
    tc = _contour(truth) if truth is not None else np.zeros_like(pc)
    rgb[pc & ~tc] = PRED_COLOR
    rgb[tc & ~pc] = TRUTH_COLOR
    rgb[pc & tc] = BOTH_COLOR
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(rgb).save(path)
    return rgb


def _safe_name(case_id: str) -> str:
    return case_id.replace("/", "__").replace("\\", "__")


@dataclass
class EvaluationReport:
    split: str
    classification: metrics.ClassificationReport
    one_vs_rest: dict[str, metrics.OneVsRest]
    segmentation: dict | None
    cases: list[CaseResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "n_cases": len(self.cases),
            "classification": {
                **self.classification.to_dict(),
                "sensitivity_specificity": {
                    c: {"sensitivity": r.sensitivity, "specificity": r.specificity,
                        "sensitivity_defined": r.sensitivity_defined,
                        "specificity_defined": r.specificity_defined}
                    for c, r in self.one_vs_rest.items()
                },
            },
            "segmentation": self.segmentation,
            "cases": [c.to_dict() for c in self.cases],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def summarize_segmentation(scores: list[metrics.SegScores]) -> dict | None:
    """Means over cases with a tumor in the ground truth; None when there are none."""
    if not scores:
        return None
    finite = [s.hausdorff for s in scores if math.isfinite(s.hausdorff)]
    return {
        "n_cases": len(scores),
        "mean_dice": math.fsum(s.dice for s in scores) / len(scores),
        "mean_iou": math.fsum(s.iou for s in scores) / len(scores),
        "mean_hausdorff": math.fsum(finite) / len(finite) if finite else None,
        "hausdorff_undefined": len(scores) - len(finite),
    }


def evaluate_suite(
    classifier: TumorClassifier,
    segmenter: ResUNet,
    manifest: Manifest,
    split: str = "test",
    out_dir: str | Path | None = None,
    gate: bool = False,
    threshold: float = 0.5,
    overlays: bool = True,
) -> EvaluationReport:
    """Run every case of ``split`` through both models and aggregate the scores.

    Cases are processed in case_id order. Segmentation means cover cases
    whose ground-truth mask is non-empty; without any, the segmentation
    section is ``None``.
    """
    records = sorted(manifest.split(split), key=lambda r: r.case_id)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    out = Path(out_dir) if out_dir is not None else None

    results: list[CaseResult] = []
    tumor_scores: list[metrics.SegScores] = []
    for rec in records:
        img = normalize(read_image(rec.image_ref))
        truth = read_mask(rec.mask_ref) if rec.mask_ref else None
        res = run_case(classifier, segmenter, img, gate=gate, threshold=threshold,
                       case_id=rec.case_id, truth=truth, true_label=rec.label)
        if res.seg_scores is not None and truth is not None and truth.any():
            tumor_scores.append(res.seg_scores)
        if out is not None and overlays and res.mask is not None:
            name = f"overlays/{_safe_name(rec.case_id)}.png"
            render_overlay(img, res.mask, truth, out / name)
            res.overlay_ref = name
        results.append(res)

    cls_report = metrics.confusion_and_report(
        [r.predicted_label for r in results], [r.true_label for r in results]
    )
    report = EvaluationReport(
        split=split,
        classification=cls_report,
        one_vs_rest={c: metrics.sensitivity_specificity(cls_report.matrix, c) for c in LABELS},
        segmentation=summarize_segmentation(tumor_scores),
        cases=results,
    )
    if out is not None:
        write_report(report, out)
    return report


CSV_FIELDS = ["case_id", "true_label", "predicted_label", *[f"p_{lab}" for lab in LABELS],
              "dice", "iou", "hausdorff"]


def write_report(report: EvaluationReport, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    with open(out / "cases.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for c in report.cases:
            s = c.seg_scores
            writer.writerow({
                "case_id": c.case_id,
                "true_label": c.true_label or "",
                "predicted_label": c.predicted_label,
                **{f"p_{lab}": repr(p) for lab, p in c.class_probs.to_dict().items()},
                "dice": "" if s is None else repr(s.dice),
                "iou": "" if s is None else repr(s.iou),
                "hausdorff": "" if s is None or not math.isfinite(s.hausdorff) else repr(s.hausdorff),
            })
    render_figures(report.to_dict(), out / "figures")
    return out


def render_figures(report: dict, fig_dir: str | Path) -> list[Path]:
    """Figures derived from a report dictionary (as stored in report.json)."""
    fig_dir = Path(fig_dir)
    cls = report["classification"]
    paths = [plotting.plot_confusion_matrix(
        cls["confusion_matrix"], cls["class_order"], fig_dir / "confusion_matrix.png",
        title=f"{report['split']} accuracy {cls['accuracy']:.3f}",
    )]
    scored = [c["seg_scores"] for c in report["cases"] if "seg_scores" in c]
    if scored:
        paths.append(plotting.plot_seg_scores(
            [s["dice"] for s in scored], [s["iou"] for s in scored], fig_dir / "seg_scores.png"
        ))
    return paths
