"""Case manifests: directory ingestion, stratified splitting and synthetic phantoms.

A manifest is an ordered, immutable list of :class:`CaseRecord` entries plus
the seed and split fractions used to assign each record to train/val/test.
It round-trips through JSON (see :meth:`Manifest.to_json`).
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import draw

logger = logging.getLogger(__name__)

LABELS: tuple[str, ...] = ("meningioma", "glioma", "pituitary", "no_tumor")
SPLITS: tuple[str, ...] = ("train", "val", "test")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}

# Per-class image counts of the public four-class dataset (training, testing).
TABLE1_CLASSIFICATION = {
    "meningioma": (1339, 306),
    "glioma": (1321, 300),
    "pituitary": (1457, 300),
    "no_tumor": (1595, 405),
}
# Tumor-present counts (yes, no) for the segmentation dataset and the merged set.
TABLE1_SEGMENTATION = {"train": (1167, 2181), "test": (206, 386)}
TABLE1_MERGED = {"train": (8584, 3776), "test": (1112, 791)}
# Alternative accounting: a single pool of 3064 images split 70/15/15.
POOLED_DATASET_SIZE = 3064
PAPER_SPLIT = (0.70, 0.15, 0.15)


class DatasetError(ValueError):
    """Raised for fatal manifest / ingestion problems."""


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    image_ref: str
    label: str
    mask_ref: str | None = None
    split: str = "train"
    source: str = ""

    def __post_init__(self) -> None:
        if self.label not in LABELS:
            raise DatasetError(f"unknown label {self.label!r}; expected one of {LABELS}")
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}; expected one of {SPLITS}")


@dataclass(frozen=True)
class Manifest:
    records: tuple[CaseRecord, ...]
    seed: int = 0
    split_fractions: tuple[float, float, float] = (1.0, 0.0, 0.0)
    created_at: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds")
    )
    # Record-level ingestion problems (unreadable files, bad masks); not persisted.
    errors: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        ids = [r.case_id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate case_id(s): {dupes[:5]}")
        _check_fractions(self.split_fractions)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[CaseRecord]:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def counts(self) -> dict[str, dict[str, int]]:
        """Nested ``{split: {label: count}}`` table."""
        out = {s: {lab: 0 for lab in LABELS} for s in SPLITS}
        for r in self.records:
            out[r.split][r.label] += 1
        return out

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "split_fractions": list(self.split_fractions),
            "created_at": self.created_at,
            "records": [asdict(r) for r in self.records],
        }

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def from_dict(cls, data: Mapping) -> "Manifest":
        records = tuple(CaseRecord(**r) for r in data["records"])
        kwargs = {}
        if "created_at" in data:
            kwargs["created_at"] = data["created_at"]
        return cls(
            records=records,
            seed=int(data["seed"]),
            split_fractions=tuple(float(f) for f in data["split_fractions"]),
            **kwargs,
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "Manifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_fractions(fractions: Sequence[float]) -> None:
    if len(fractions) != 3:
        raise DatasetError(f"split fractions must have 3 entries, got {len(fractions)}")
    if any(f < 0 for f in fractions):
        raise DatasetError(f"split fractions must be non-negative, got {tuple(fractions)}")
    if abs(math.fsum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"split fractions must sum to 1, got {tuple(fractions)}")


# --------------------------------------------------------------------------- io


def read_image(path: str | Path) -> np.ndarray:
    """Read a 2-D grayscale image (8- or 16-bit) as an integer array."""
    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I;16B", "I;16L", "I"):
            im = im.convert("L")
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise DatasetError(f"{path}: expected a 2-D grayscale image, got shape {arr.shape}")
    return arr


def read_mask(path: str | Path) -> np.ndarray:
    return (read_image(path) > 0).astype(np.uint8)


def write_png(path: str | Path, array: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(array)
    if arr.dtype == np.uint16:
        Image.fromarray(arr).save(path)
    else:
        Image.fromarray(arr.astype(np.uint8)).save(path)
    return path


# -------------------------------------------------------------------- ingestion


def _probe(path: Path) -> tuple[int, int]:
    return read_image(path).shape


def ingest_directory(
    root: str | Path,
    label_rule: Mapping[str, str] | None = None,
    source: str = "",
    workers: int = 4,
) -> Manifest:
    """Build a manifest from a directory-per-class tree.

    ``label_rule`` maps subdirectory names to labels; by default every label
    name maps to itself. Masks are looked up by filename stem in a ``masks/``
    directory next to the class directories. Unreadable images are reported in
    ``Manifest.errors`` and skipped; all records start in the train split.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    if label_rule is None:
        label_rule = {lab: lab for lab in LABELS}
    for lab in label_rule.values():
        if lab not in LABELS:
            raise DatasetError(f"label_rule maps to unknown label {lab!r}")

    mask_dir = root / "masks"
    masks = {}
    if mask_dir.is_dir():
        masks = {
            p.stem: p for p in sorted(mask_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES
        }

    candidates: list[tuple[str, Path]] = []
    for subdir, label in sorted(label_rule.items()):
        d = root / subdir
        if not d.is_dir():
            continue
        candidates.extend(
            (label, p) for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES
        )
    if not candidates:
        raise DatasetError(f"no images found under {root} for subdirectories {sorted(label_rule)}")

    def probe(path: Path):
        try:
            return _probe(path)
        except Exception as exc:  # noqa: BLE001 - collected, not raised
            return exc

    paths = [p for _, p in candidates] + list(masks.values())
    with ThreadPoolExecutor(max_workers=workers) as pool:
        shapes = dict(zip(paths, pool.map(probe, paths)))

    records: list[CaseRecord] = []
    errors: list[str] = []
    for label, path in candidates:
        shape = shapes[path]
        if isinstance(shape, Exception):
            errors.append(f"{path}: unreadable image ({shape})")
            continue
        mask_ref = None
        mpath = masks.get(path.stem)
        if mpath is not None:
            mshape = shapes[mpath]
            if isinstance(mshape, Exception):
                errors.append(f"{mpath}: unreadable mask ({mshape})")
            elif mshape != shape:
                errors.append(f"{mpath}: mask shape {mshape} != image shape {shape}")
            elif label == "no_tumor" and read_mask(mpath).any():
                errors.append(f"{mpath}: no_tumor case has a non-empty mask; mask ignored")
            else:
                mask_ref = str(mpath)
        records.append(
            CaseRecord(
                case_id=f"{path.parent.name}/{path.stem}",
                image_ref=str(path),
                label=label,
                mask_ref=mask_ref,
                source=source or root.name,
            )
        )
    for e in errors:
        logger.warning(e)
    return Manifest(records=tuple(records), errors=tuple(errors))


# ------------------------------------------------------------------- splitting


def _largest_remainder(ideal: np.ndarray, lo: np.ndarray, hi: np.ndarray, total: int) -> np.ndarray:
    """Integers in [lo, hi] summing to ``total``, closest to ``ideal``.

    Starts from ``lo`` and hands out the remaining units to entries with the
    largest shortfall ``ideal - current``; ties go to the earlier entry.
    """
    out = lo.copy()
    need = total - int(out.sum())
    if need < 0 or need > int((hi - lo).sum()):
        raise DatasetError("cannot apportion split counts under the stratification bound")
    while need > 0:
        gap = np.where(out < hi, ideal - out, -np.inf)
        i = int(np.argmax(gap))
        out[i] += 1
        need -= 1
    return out


def split_counts(label_totals: Sequence[int], fractions: Sequence[float]) -> np.ndarray:
    """Per-label (train, val, test) counts, shape ``(n_labels, 3)``.

    Global totals are ``floor(N*f_train)``, ``floor(N*f_val)`` and the remainder;
    every per-label count stays within one record of ``fraction * label_total``.
    Among admissible tables the one closest (squared error) to the ideal is
    returned, ties broken by enumeration order. When no table meets both the
    totals and the one-record bound, the bound is widened one record at a time.
    """
    _check_fractions(fractions)
    n = [int(k) for k in label_totals]
    total = sum(n)
    f = [float(x) for x in fractions]
    n_train = math.floor(total * f[0] + 1e-9)
    n_val = math.floor(total * f[1] + 1e-9)

    def solve(radius: int) -> list[tuple[int, int]] | None:
        def near(x: float, hi: int) -> list[int]:
            lo_k = math.ceil(x - radius - 1e-9)
            return [k for k in range(lo_k, math.floor(x + radius + 1e-9) + 1) if 0 <= k <= hi]

        options = []
        for nl in n:
            opts = []
            for t in near(nl * f[0], nl):
                for v in near(nl * f[1], nl - t):
                    rest = nl - t - v
                    if abs(rest - nl * f[2]) <= radius + 1e-9:
                        err = (t - nl * f[0]) ** 2 + (v - nl * f[1]) ** 2 + (rest - nl * f[2]) ** 2
                        opts.append((err, t, v))
            options.append(sorted(opts))

        best: tuple[float, list[tuple[int, int]]] | None = None

        def search(i: int, t_sum: int, v_sum: int, err: float, chosen: list) -> None:
            nonlocal best
            if best is not None and err >= best[0] - 1e-12:
                return
            if i == len(n):
                if t_sum == n_train and v_sum == n_val:
                    best = (err, list(chosen))
                return
            for e, t, v in options[i]:
                chosen.append((t, v))
                search(i + 1, t_sum + t, v_sum + v, err + e, chosen)
                chosen.pop()

        search(0, 0, 0, 0.0, [])
        return None if best is None else best[1]

    radius = 1
    chosen = solve(radius)
    while chosen is None:
        # floor/floor/remainder totals can be incompatible with the one-record
        # bound for skewed fractions; widen the bound rather than fail
        radius += 1
        chosen = solve(radius)
    if radius > 1:
        logger.warning("split of %s by %s needs a per-label tolerance of %d records", n, f, radius)
    return np.array([(t, v, nl - t - v) for (t, v), nl in zip(chosen, n)], dtype=np.int64)


def split_manifest(m: Manifest, fractions: Sequence[float] = PAPER_SPLIT, seed: int = 0) -> Manifest:
    """Assign train/val/test by label-stratified, seeded shuffling.

    The result depends only on the set of case ids (with their labels), the
    seed and the fractions; record order in the output matches the input.
    """
    fractions = tuple(float(f) for f in fractions)
    _check_fractions(fractions)
    if len(m.records) < 3:
        raise DatasetError("need at least 3 records to split")

    by_label = {lab: sorted(r.case_id for r in m.records if r.label == lab) for lab in LABELS}
    counts = split_counts([len(by_label[lab]) for lab in LABELS], fractions)

    assignment: dict[str, str] = {}
    for li, lab in enumerate(LABELS):
        ids = by_label[lab]
        order = np.random.default_rng([seed, li]).permutation(len(ids))
        n_tr, n_va, _ = counts[li]
        for rank, idx in enumerate(order):
            split = "train" if rank < n_tr else "val" if rank < n_tr + n_va else "test"
            assignment[ids[idx]] = split

    records = tuple(replace(r, split=assignment[r.case_id]) for r in m.records)
    return replace(m, records=records, seed=seed, split_fractions=fractions)


# -------------------------------------------------------------------- phantoms


def class_counts(n: int, class_mix: Sequence[float]) -> list[int]:
    """Apportion ``n`` samples over the four classes by largest remainder."""
    mix = np.asarray(class_mix, dtype=float)
    if mix.shape != (len(LABELS),) or (mix < 0).any() or mix.sum() <= 0:
        raise DatasetError(f"class_mix must be {len(LABELS)} non-negative weights")
    ideal = n * mix / mix.sum()
    base = np.floor(ideal + 1e-9).astype(np.int64)
    return _largest_remainder(ideal, base, base + 1, n).tolist()


def _background(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Skull-and-brain background in [0, 1] plus the brain-region mask."""
    yy, xx = np.mgrid[0:size, 0:size]
    cy = size / 2 + rng.uniform(-0.03, 0.03) * size
    cx = size / 2 + rng.uniform(-0.03, 0.03) * size
    ry = size * rng.uniform(0.40, 0.44)
    rx = size * rng.uniform(0.34, 0.38)
    r = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    brain = r <= 0.85**2
    skull = (r <= 1.0) & ~brain

    noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 24)
    noise /= np.abs(noise).max() + 1e-12
    fine = rng.standard_normal((size, size)) * 0.02

    img = np.zeros((size, size))
    img[skull] = 0.65
    img[brain] = 0.32 + 0.08 * noise[brain]
    img += fine
    img[~(brain | skull)] = 0.02
    return np.clip(img, 0.0, 1.0), brain


def _tumor_mask(label: str, size: int, brain: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    c = size / 2
    if label == "meningioma":
        # round lesion hugging the inner skull surface
        theta = rng.uniform(0, 2 * np.pi)
        rad = size * rng.uniform(0.08, 0.12)
        dist = size * 0.34 - rad
        cy, cx = c + dist * np.sin(theta) * 1.1, c + dist * np.cos(theta) * 0.95
        rr, cc = draw.disk((cy, cx), rad, shape=mask.shape)
        mask[rr, cc] = True
    elif label == "glioma":
        # irregular interior blob: union of overlapping ellipses
        cy = c + rng.uniform(-0.12, 0.08) * size
        cx = c + rng.uniform(-0.15, 0.15) * size
        for _ in range(3):
            oy, ox = rng.uniform(-0.06, 0.06, size=2) * size
            ry, rx = rng.uniform(0.06, 0.11, size=2) * size
            rr, cc = draw.ellipse(cy + oy, cx + ox, ry, rx, shape=mask.shape,
                                  rotation=rng.uniform(0, np.pi))
            mask[rr, cc] = True
    elif label == "pituitary":
        # small compact lesion at the skull base, below centre
        cy = c + size * rng.uniform(0.16, 0.22)
        cx = c + size * rng.uniform(-0.03, 0.03)
        ry, rx = size * rng.uniform(0.05, 0.07), size * rng.uniform(0.06, 0.09)
        rr, cc = draw.ellipse(cy, cx, ry, rx, shape=mask.shape)
        mask[rr, cc] = True
    return mask & brain


def render_phantom(label: str, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One synthetic slice as (uint8 image, uint8 {0,1} mask)."""
    if label not in LABELS:
        raise DatasetError(f"unknown label {label!r}")
    img, brain = _background(size, rng)
    mask = _tumor_mask(label, size, brain, rng)
    if label == "meningioma":
        img[mask] = rng.uniform(0.85, 0.95) + rng.standard_normal(mask.sum()) * 0.02
    elif label == "glioma":
        tex = rng.standard_normal((size, size)) * 0.06
        img[mask] = 0.78 + tex[mask]
    elif label == "pituitary":
        img[mask] = rng.uniform(0.92, 1.0) + rng.standard_normal(mask.sum()) * 0.01
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255).astype(np.uint8), mask.astype(np.uint8)


def generate_phantoms(
    n: int,
    size: int,
    seed: int,
    class_mix: Sequence[float] = (0.25, 0.25, 0.25, 0.25),
    out_dir: str | Path = "phantoms",
) -> Manifest:
    """Write ``n`` phantom images and exact masks under ``out_dir``.

    Layout: ``images/<case_id>.png`` and ``masks/<case_id>.png``. Every case
    gets a mask file (all zero for no_tumor). Splits are left at train.
    """
    if n < len(LABELS):
        raise DatasetError(f"need n >= {len(LABELS)} phantoms to cover every class, got {n}")
    if size < 32:
        raise DatasetError(f"phantom size must be >= 32, got {size}")
    out_dir = Path(out_dir)
    counts = class_counts(n, class_mix)
    labels = [lab for lab, k in zip(LABELS, counts) for _ in range(k)]

    records = []
    for i, label in enumerate(labels):
        rng = np.random.default_rng([seed, i])
        img, mask = render_phantom(label, size, rng)
        case_id = f"{i:05d}_{label}"
        image_ref = write_png(out_dir / "images" / f"{case_id}.png", img)
        mask_ref = write_png(out_dir / "masks" / f"{case_id}.png", mask * 255)
        records.append(
            CaseRecord(
                case_id=case_id,
                image_ref=str(image_ref),
                label=label,
                mask_ref=str(mask_ref),
                source=f"phantom(seed={seed},size={size})",
            )
        )
    return Manifest(records=tuple(records), seed=seed)
