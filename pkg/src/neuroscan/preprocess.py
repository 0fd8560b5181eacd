"""Intensity normalization, resizing and seeded joint image/mask augmentation.

Images are plain 2-D float32 arrays in [0, 1]; masks are 2-D uint8 arrays in
{0, 1}. Everything here is a pure function of its arguments.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

CLASSIFIER_INPUT_SIZE = (224, 224)
SEGMENTER_INPUT_SIZE = (256, 256)


def normalize(img: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling to [0, 1]; constant images map to zeros."""
    x = np.asarray(img, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalize an empty image")
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros(x.shape, dtype=np.float32)
    return ((x - lo) / (hi - lo)).astype(np.float32)


def resize(img: np.ndarray, target: tuple[int, int], is_mask: bool = False) -> np.ndarray:
    """Bilinear resize for images, nearest-neighbour for masks."""
    h, w = int(target[0]), int(target[1])
    if h <= 0 or w <= 0:
        raise ValueError(f"target size must be positive, got {target}")
    arr = np.asarray(img)
    if arr.shape == (h, w):
        return arr.copy()
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None, None]
    if is_mask:
        out = F.interpolate(t, size=(h, w), mode="nearest")[0, 0].numpy()
        return (out >= 0.5).astype(np.uint8)
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)[0, 0].numpy()
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class AugmentationPolicy:
    max_rotation_deg: float = 15.0
    h_flip: bool = True
    v_flip: bool = True
    zoom_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.max_rotation_deg <= 180:
            raise ValueError(f"max_rotation_deg must be in [0, 180], got {self.max_rotation_deg}")
        low, high = self.zoom_range
        if not (0 < low <= 1 <= high):
            raise ValueError(f"zoom_range must satisfy 0 < low <= 1 <= high, got {self.zoom_range}")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentationPolicy":
        return cls(max_rotation_deg=0.0, h_flip=False, v_flip=False, zoom_range=(1.0, 1.0), seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        d = dict(d)
        if "zoom_range" in d:
            d["zoom_range"] = tuple(d["zoom_range"])
        return cls(**d)


@dataclass(frozen=True)
class AugmentParams:
    angle_deg: float
    h_flip: bool
    v_flip: bool
    zoom: float


def draw_params(policy: AugmentationPolicy, draw_seed: int) -> AugmentParams:
    # all four draws happen regardless of which augmentations are enabled,
    # so toggling one does not reshuffle the others
    rng = np.random.default_rng([policy.seed, draw_seed])
    u_angle, u_h, u_v, u_zoom = rng.random(4)
    low, high = policy.zoom_range
    return AugmentParams(
        angle_deg=float((2 * u_angle - 1) * policy.max_rotation_deg),
        h_flip=bool(policy.h_flip and u_h < 0.5),
        v_flip=bool(policy.v_flip and u_v < 0.5),
        zoom=float(low + (high - low) * u_zoom),
    )


def _affine(arr: np.ndarray, angle_deg: float, zoom: float, order: int) -> np.ndarray:
    """Rotate by ``angle_deg`` and scale by ``zoom`` about the image centre."""
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    # output->input mapping: inverse rotation, inverse scale
    # rounding removes float noise so quarter turns land exactly on the grid
    matrix = np.round(np.array([[c, s], [-s, c]]) / zoom, 12)
    centre = (np.array(arr.shape, dtype=float) - 1) / 2
    offset = np.round(centre - matrix @ centre, 9)
    return ndimage.affine_transform(
        arr.astype(np.float64), matrix, offset=offset, order=order, mode="constant", cval=0.0
    )


def apply_params(
    img: np.ndarray, mask: np.ndarray | None, params: AugmentParams
) -> tuple[np.ndarray, np.ndarray | None]:
    out_img = np.asarray(img, dtype=np.float32)
    out_mask = None if mask is None else np.asarray(mask, dtype=np.uint8)
    if params.h_flip:
        out_img = out_img[:, ::-1]
        out_mask = None if out_mask is None else out_mask[:, ::-1]
    if params.v_flip:
        out_img = out_img[::-1, :]
        out_mask = None if out_mask is None else out_mask[::-1, :]
    if params.angle_deg != 0.0 or params.zoom != 1.0:
        out_img = np.clip(_affine(out_img, params.angle_deg, params.zoom, order=1), 0.0, 1.0)
        if out_mask is not None:
            out_mask = _affine(out_mask, params.angle_deg, params.zoom, order=0) >= 0.5
    out_img = np.ascontiguousarray(out_img, dtype=np.float32)
    if out_mask is not None:
        out_mask = np.ascontiguousarray(out_mask, dtype=np.uint8)
    return out_img, out_mask


def augment(
    img: np.ndarray,
    mask: np.ndarray | None,
    policy: AugmentationPolicy,
    draw_seed: int,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Apply one random geometric transform jointly to ``img`` and ``mask``.

    The transform depends only on ``(policy.seed, draw_seed)``. Flips are
    exact pixel permutations; rotation and zoom use bilinear interpolation
    for the image and nearest-neighbour (re-binarized at 0.5) for the mask.
    """
    img = np.asarray(img)
    if mask is not None and np.shape(mask) != img.shape:
        raise ValueError(f"mask shape {np.shape(mask)} does not match image shape {img.shape}")
    return apply_params(img, mask, draw_params(policy, draw_seed))
