"""``neuroscan`` command line.

Subcommands: prepare, phantoms, train, evaluate, predict, report.
Exit codes: 0 success, 2 invalid input or configuration, 1 internal error.
Configuration resolves as preset defaults < ``--config`` JSON file < flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from neuroscan import __version__
from neuroscan.dataset import LABELS, DatasetError, Manifest, generate_phantoms, ingest_directory, split_manifest

logger = logging.getLogger("neuroscan")


class UsageError(Exception):
    """Bad flags, files or configuration; mapped to exit code 2."""


def _fractions(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--split expects three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise UsageError(f"--split expects three fractions (train,val,test), got {len(parts)}")
    if any(p < 0 for p in parts) or abs(sum(parts) - 1) > 1e-9:
        raise UsageError(f"--split fractions must be non-negative and sum to 1, got {parts} (sum {sum(parts)})")
    return parts


def _size(text: str | int | list | None):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return (int(text[0]), int(text[1]))
    if isinstance(text, int):
        return (text, text)
    parts = [int(x) for x in str(text).lower().replace("x", ",").split(",")]
    return (parts[0], parts[0]) if len(parts) == 1 else (parts[0], parts[1])


# --------------------------------------------------------------- run config


@dataclass
class RunConfig:
    task: str
    preset: str
    manifest: str | None
    run_dir: str
    train: dict
    model: dict
    augmentation: dict | None
    init_seed: int = 0
    sources: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "preset": self.preset,
            "manifest": self.manifest,
            "run_dir": self.run_dir,
            "train": self.train,
            "model": self.model,
            "augmentation": self.augmentation,
            "init_seed": self.init_seed,
            "sources": self.sources,
        }


_TRAIN_FLAGS = {
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "weight_decay": "weight_decay",
    "dropout": "dropout_rate",
    "lr_factor": "lr_factor",
    "lr_patience": "lr_patience",
    "early_stop_metric": "early_stop_metric",
    "early_stop_patience": "early_stop_patience",
    "seed": "seed",
    "loss": "loss",
}


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    from neuroscan.classifier import ClassifierSpec
    from neuroscan.preprocess import AugmentationPolicy
    from neuroscan.segmenter import SegmenterSpec
    from neuroscan.training import PRESETS, TrainConfig, resolve_run_dir

    if (args.task, args.preset) not in PRESETS:
        raise UsageError(f"no preset {args.preset!r} for task {args.task!r}")
    sources = [f"preset:{args.preset}"]
    train = TrainConfig.preset(args.task, args.preset).to_dict()
    if args.task == "classification":
        model = ClassifierSpec(dropout_rate=train["dropout_rate"]).to_dict()
    else:
        model = SegmenterSpec().to_dict()
    augmentation: dict | None = AugmentationPolicy(seed=train["seed"]).to_dict()
    file_cfg: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} not found")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        sources.append(f"file:{path}")
        train.update(file_cfg.get("train", {}))
        model.update(file_cfg.get("model", {}))
        if "augmentation" in file_cfg:
            augmentation = file_cfg["augmentation"]

    flags = {}
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            train[key] = value
            flags[key] = value
    if args.task == "classification":
        if args.dropout is not None:
            model["dropout_rate"] = args.dropout
        else:
            model["dropout_rate"] = train["dropout_rate"]
        if args.backbone:
            model["backbone"] = args.backbone
        if args.weights_path:
            model["weights_path"] = args.weights_path
        if args.no_freeze:
            model["freeze_backbone"] = False
    else:
        if args.depth is not None or args.base_filters is not None:
            depth = args.depth if args.depth is not None else model["depth"]
            base = args.base_filters if args.base_filters is not None else model["base_filters"]
            model.update(depth=depth, base_filters=base, bottleneck_filters=base * 2**depth,
                         residual_blocks=2 * depth + 2)
    if args.input_size:
        model["input_size"] = list(_size(args.input_size))
    if args.no_augment:
        augmentation = None
    elif augmentation is not None:
        if args.max_rotation is not None:
            augmentation["max_rotation_deg"] = args.max_rotation
        augmentation.setdefault("seed", train["seed"])
    if flags or args.input_size or args.no_augment:
        sources.append("flags")

    manifest = args.manifest or file_cfg.get("manifest")
    run_dir = args.run_dir or file_cfg.get("run_dir") or str(resolve_run_dir(None, f"runs/{args.task}"))

    # validate everything before any work starts
    try:
        TrainConfig(**train)
        if args.task == "classification":
            ClassifierSpec.from_dict(model)
        else:
            SegmenterSpec.from_dict(model)
        if augmentation is not None:
            AugmentationPolicy.from_dict(augmentation)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return RunConfig(
        task=args.task, preset=args.preset, manifest=manifest, run_dir=run_dir, train=train,
        model=model, augmentation=augmentation, init_seed=train["seed"], sources=sources,
    )


# ------------------------------------------------------------------ commands


def _load_manifest(path: str | None) -> Manifest:
    if not path:
        raise UsageError("--manifest is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"manifest {p} not found")
    try:
        return Manifest.from_json(p)
    except (KeyError, TypeError, json.JSONDecodeError, DatasetError) as exc:
        raise UsageError(f"manifest {p} is invalid: {exc}") from None


def _label_rule(text: str | None) -> dict[str, str] | None:
    if not text:
        return None
    rule = {}
    for item in text.split(","):
        if "=" not in item:
            raise UsageError(f"--label-map entries look like dirname=label, got {item!r}")
        d, lab = item.split("=", 1)
        if lab not in LABELS:
            raise UsageError(f"--label-map: unknown label {lab!r}; expected one of {LABELS}")
        rule[d] = lab
    return rule


def cmd_prepare(args: argparse.Namespace) -> int:
    fractions = _fractions(args.split)
    root = Path(args.root)
    if not root.is_dir():
        raise UsageError(f"dataset root {root} does not exist")
    m = ingest_directory(root, _label_rule(args.label_map), source=args.source or "")
    m = split_manifest(m, fractions, seed=args.seed)
    out = m.to_json(args.out)
    for err in m.errors:
        print(f"warning: {err}", file=sys.stderr)
    counts = m.counts()
    print(json.dumps({"manifest": str(out), "records": len(m), "errors": len(m.errors),
                      "counts": counts}, indent=2))
    return 0


def cmd_phantoms(args: argparse.Namespace) -> int:
    fractions = _fractions(args.split)
    mix = [float(x) for x in args.mix.split(",")]
    if len(mix) != len(LABELS):
        raise UsageError(f"--mix expects {len(LABELS)} weights, got {len(mix)}")
    out = Path(args.out)
    m = generate_phantoms(args.n, args.size, args.seed, mix, out_dir=out)
    m = split_manifest(m, fractions, seed=args.seed)
    path = m.to_json(out / "manifest.json")
    print(json.dumps({"manifest": str(path), "records": len(m), "counts": m.counts()}, indent=2))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_run_config(args)
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0
    manifest = _load_manifest(cfg.manifest)

    from neuroscan import plotting
    from neuroscan.classifier import ClassifierSpec, build_classifier
    from neuroscan.preprocess import AugmentationPolicy
    from neuroscan.segmenter import SegmenterSpec, build_segmenter
    from neuroscan.training import TrainConfig, train

    tcfg = TrainConfig(**cfg.train)
    if cfg.task == "classification":
        model = build_classifier(ClassifierSpec.from_dict(cfg.model), seed=cfg.init_seed)
    else:
        model = build_segmenter(SegmenterSpec.from_dict(cfg.model), seed=cfg.init_seed)
    policy = AugmentationPolicy.from_dict(cfg.augmentation) if cfg.augmentation else None
    try:
        _, state, ckpt = train(model, manifest, tcfg, run_dir=cfg.run_dir, policy=policy,
                               extra_config={"run": cfg.to_dict()})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    run_dir = Path(cfg.run_dir)
    metric_name = "accuracy" if cfg.task == "classification" else "dice"
    plotting.plot_history(list(state.history), run_dir / "figures" / "history.png", metric_name)
    print(json.dumps({
        "run_dir": str(run_dir),
        "checkpoint": str(ckpt),
        "epochs_completed": state.epoch,
        "best_epoch": state.best_epoch,
        "best_metric": state.best_metric,
        "final_lr": state.current_lr,
    }, indent=2))
    return 0


def _checkpoint_dir(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"--{what} checkpoint directory is required")
    p = Path(path)
    for cand in (p, p / "checkpoints" / "best"):
        if (cand / "meta.json").exists() and (cand / "params.pt").exists():
            return cand
    raise UsageError(f"no {what} checkpoint found at {p}")


def _load_models(args: argparse.Namespace):
    from neuroscan.classifier import load_classifier
    from neuroscan.pipeline import check_resolutions
    from neuroscan.segmenter import load_segmenter

    try:
        classifier = load_classifier(_checkpoint_dir(args.classifier, "classifier"))
        segmenter = load_segmenter(_checkpoint_dir(args.segmenter, "segmenter"))
        check_resolutions(classifier, segmenter, {
            "classifier": _size(args.classifier_size),
            "segmenter": _size(args.segmenter_size),
        })
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return classifier, segmenter


def cmd_evaluate(args: argparse.Namespace) -> int:
    from neuroscan.pipeline import evaluate_suite

    classifier, segmenter = _load_models(args)
    manifest = _load_manifest(args.manifest)
    try:
        report = evaluate_suite(classifier, segmenter, manifest, split=args.split, out_dir=args.out,
                                gate=args.gate, threshold=args.threshold, overlays=not args.no_overlays)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    summary = {
        "report": str(Path(args.out) / "report.json"),
        "n_cases": len(report.cases),
        "accuracy": report.classification.accuracy,
        "segmentation": report.segmentation,
    }
    print(json.dumps(summary, indent=2))
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    from neuroscan.dataset import read_image, read_mask, write_png
    from neuroscan.pipeline import render_overlay, run_case
    from neuroscan.preprocess import normalize

    classifier, segmenter = _load_models(args)
    image = Path(args.image)
    if not image.exists():
        raise UsageError(f"image {image} not found")
    if not 0 < args.threshold < 1:
        raise UsageError(f"--threshold must be in (0, 1), got {args.threshold}")
    img = normalize(read_image(image))
    truth = read_mask(args.truth) if args.truth else None
    if truth is not None and truth.shape != img.shape:
        raise UsageError(f"--truth mask shape {truth.shape} != image shape {img.shape}")
    res = run_case(classifier, segmenter, img, gate=not args.no_gate, threshold=args.threshold,
                   case_id=image.stem, truth=truth)
    if res.mask is not None:
        out = Path(args.out)
        mask_path = write_png(out / f"{image.stem}_mask.png", res.mask.pixels * 255)
        res.mask_ref = str(mask_path)
        if not args.no_overlay:
            overlay = out / f"{image.stem}_overlay.png"
            render_overlay(img, res.mask, truth, overlay)
            res.overlay_ref = str(overlay)
    print(json.dumps(res.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    from neuroscan import plotting
    from neuroscan.pipeline import render_figures

    written = []
    if args.run_dir:
        run_dir = Path(args.run_dir)
        hist = run_dir / "history.json"
        if not hist.exists():
            raise UsageError(f"{hist} not found")
        history = json.loads(hist.read_text())
        task = json.loads((run_dir / "config.json").read_text())["train"]["task"]
        written.append(plotting.plot_history(
            history, run_dir / "figures" / "history.png",
            "accuracy" if task == "classification" else "dice",
        ))
    if args.report:
        rpath = Path(args.report)
        if not rpath.exists():
            raise UsageError(f"{rpath} not found")
        written += render_figures(json.loads(rpath.read_text()), rpath.parent / "figures")
    if not written:
        raise UsageError("give --run-dir and/or --report")
    print(json.dumps({"figures": [str(p) for p in written]}, indent=2))
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuroscan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest a directory-per-class tree and split it")
    p.add_argument("--root", required=True)
    p.add_argument("--split", default="0.7,0.15,0.15")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", default="manifest.json")
    p.add_argument("--label-map", help="dirname=label pairs, comma separated")
    p.add_argument("--source")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("phantoms", help="generate a synthetic phantom dataset")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mix", default="0.25,0.25,0.25,0.25")
    p.add_argument("--split", default="0.7,0.15,0.15")
    p.add_argument("--out", default="phantoms")
    p.set_defaults(func=cmd_phantoms)

    p = sub.add_parser("train", help="train the classifier or the segmenter")
    p.add_argument("--task", choices=["classification", "segmentation"], required=True)
    p.add_argument("--preset", default="paper", choices=["paper", "paper_alt", "desk"])
    p.add_argument("--config", help="JSON file with train/model/augmentation sections")
    p.add_argument("--manifest")
    p.add_argument("--run-dir")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lr-factor", type=float)
    p.add_argument("--lr-patience", type=int)
    p.add_argument("--early-stop-metric", choices=["val_accuracy", "val_loss"])
    p.add_argument("--early-stop-patience", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss", choices=["cce", "bce_dice", "bce", "dice"])
    p.add_argument("--input-size", help="H or HxW")
    p.add_argument("--backbone", choices=["tiny_cnn", "pretrained_b1"])
    p.add_argument("--weights-path")
    p.add_argument("--no-freeze", action="store_true")
    p.add_argument("--depth", type=int)
    p.add_argument("--base-filters", type=int)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--max-rotation", type=float)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (
        ("evaluate", cmd_evaluate, "evaluate both models on a manifest split"),
        ("predict", cmd_predict, "classify and segment one image"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--classifier", required=True, help="classifier run or checkpoint dir")
        p.add_argument("--segmenter", required=True, help="segmenter run or checkpoint dir")
        p.add_argument("--threshold", type=float, default=0.5)
        p.add_argument("--classifier-size", help="expected classifier input size")
        p.add_argument("--segmenter-size", help="expected segmenter input size")
        p.set_defaults(func=func)
        if name == "evaluate":
            p.add_argument("--manifest", required=True)
            p.add_argument("--split", default="test", choices=["train", "val", "test"])
            p.add_argument("--out", default="eval")
            p.add_argument("--gate", action="store_true", help="segment only predicted tumors")
            p.add_argument("--no-overlays", action="store_true")
        else:
            p.add_argument("--image", required=True)
            p.add_argument("--truth", help="optional ground-truth mask")
            p.add_argument("--out", default=".")
            p.add_argument("--no-gate", action="store_true", help="always run the segmenter")
            p.add_argument("--no-overlay", action="store_true")

    p = sub.add_parser("report", help="render figures for a run directory and/or report.json")
    p.add_argument("--run-dir")
    p.add_argument("--report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
