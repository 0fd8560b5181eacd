"""Residual U-Net for binary tumor segmentation.

Layout for ``depth = d`` (defaults d=4, base 64, bottleneck 1024)::

    encoder   d x ResidualBlock (2 convs each), 2x2 max-pool between levels
    bottleneck 2 x single-conv residual units (widen to base*2^d, then refine)
    decoder   d x [2x2 transposed conv, concat skip, ResidualBlock (2 convs)]
    output    1x1 conv to one channel, sigmoid

That is ``5d + 3`` convolutional layers (23 for d=4) and ``2d + 2`` residual
blocks (10 for d=4). Shortcuts carry no parameters: channel growth is
zero-padded, and decoder blocks add the upsampled path back to their output.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class SegmenterSpec:
    depth: int = 4
    base_filters: int = 64
    bottleneck_filters: int = 1024
    filter_size: int = 3
    residual_blocks: int = 10
    use_batch_norm: bool = True
    input_size: tuple[int, int] = (256, 256)

    def __post_init__(self) -> None:
        if self.depth < 1 or self.base_filters < 1:
            raise ValueError("depth and base_filters must be positive")
        if self.bottleneck_filters != self.base_filters * 2**self.depth:
            raise ValueError(
                f"bottleneck_filters must equal base_filters * 2**depth "
                f"({self.base_filters * 2**self.depth}), got {self.bottleneck_filters}"
            )
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ValueError(f"filter_size must be odd, got {self.filter_size}")
        if self.residual_blocks != 2 * self.depth + 2:
            raise ValueError(
                f"this layout has 2*depth + 2 = {2 * self.depth + 2} residual blocks, "
                f"got residual_blocks={self.residual_blocks}"
            )
        check_resolution(self.input_size, self.depth)

    @classmethod
    def scaled(cls, depth: int = 4, base_filters: int = 64, **kw) -> "SegmenterSpec":
        """Spec with the dependent counts filled in for a given depth and width."""
        return cls(
            depth=depth,
            base_filters=base_filters,
            bottleneck_filters=base_filters * 2**depth,
            residual_blocks=2 * depth + 2,
            **kw,
        )

    @property
    def conv_layers(self) -> int:
        return 5 * self.depth + 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SegmenterSpec":
        d = dict(d)
        d["input_size"] = tuple(d.get("input_size", (256, 256)))
        return cls(**d)


def check_resolution(size, depth: int) -> None:
    step = 2**depth
    if any(int(s) <= 0 or int(s) % step for s in size):
        raise ValueError(f"input size {tuple(size)} must be positive and divisible by 2**depth = {step}")


def _pad_channels(x: torch.Tensor, channels: int) -> torch.Tensor:
    extra = channels - x.shape[1]
    if extra == 0:
        return x
    return F.pad(x, (0, 0, 0, 0, 0, extra))


class ConvUnit(nn.Module):
    """conv -> (BN) -> optional ReLU."""

    def __init__(self, cin: int, cout: int, k: int, bn: bool, relu: bool = True) -> None:
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, k, padding=k // 2, bias=not bn)
        self.bn = nn.BatchNorm2d(cout) if bn else nn.Identity()
        self.relu = relu

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.bn(self.conv(x))
        return torch.relu(x) if self.relu else x


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, k: int, bn: bool, n_convs: int = 2) -> None:
        super().__init__()
        if cout < cin:
            raise ValueError("zero-padded shortcuts cannot reduce channels")
        units = [ConvUnit(cin, cout, k, bn)]
        units += [ConvUnit(cout, cout, k, bn) for _ in range(n_convs - 1)]
        units[-1].relu = False
        self.body = nn.Sequential(*units)
        self.cout = cout

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.body(x) + _pad_channels(x, self.cout))


class DecoderBlock(ResidualBlock):
    """Residual block over ``cat(skip, up)`` whose shortcut is the upsampled path."""

    def __init__(self, cout: int, k: int, bn: bool) -> None:
        nn.Module.__init__(self)
        first = ConvUnit(2 * cout, cout, k, bn)
        second = ConvUnit(cout, cout, k, bn, relu=False)
        self.body = nn.Sequential(first, second)
        self.cout = cout

    def forward(self, up: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:  # type: ignore[override]
        return torch.relu(self.body(torch.cat([skip, up], dim=1)) + up)


class ResUNet(nn.Module):
    def __init__(self, spec: SegmenterSpec) -> None:
        super().__init__()
        self.spec = spec
        k, bn, d = spec.filter_size, spec.use_batch_norm, spec.depth
        widths = [spec.base_filters * 2**i for i in range(d)]

        self.encoders = nn.ModuleList()
        cin = 1
        for w in widths:
            self.encoders.append(ResidualBlock(cin, w, k, bn))
            cin = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = nn.Sequential(
            ResidualBlock(widths[-1], spec.bottleneck_filters, k, bn, n_convs=1),
            ResidualBlock(spec.bottleneck_filters, spec.bottleneck_filters, k, bn, n_convs=1),
        )
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        cin = spec.bottleneck_filters
        for w in reversed(widths):
            self.ups.append(nn.ConvTranspose2d(cin, w, 2, stride=2))
            self.decoders.append(DecoderBlock(w, k, bn))
            cin = w
        self.head = nn.Conv2d(widths[0], 1, 1)

        n_conv, n_res = self.conv_layer_count(), self.residual_block_count()
        assert n_conv == spec.conv_layers, f"built {n_conv} conv layers, expected {spec.conv_layers}"
        assert n_res == spec.residual_blocks, f"built {n_res} residual blocks, expected {spec.residual_blocks}"

    def conv_layer_count(self) -> int:
        return sum(isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)) for m in self.modules())

    def residual_block_count(self) -> int:
        return sum(isinstance(m, ResidualBlock) for m in self.modules())

    @property
    def bottleneck_channels(self) -> int:
        return self.bottleneck[-1].cout

    @property
    def input_size(self) -> tuple[int, int]:
        return tuple(self.spec.input_size)

    def architecture(self) -> dict:
        return {
            "conv_layers": self.conv_layer_count(),
            "residual_blocks": self.residual_block_count(),
            "encoder_widths": [e.cout for e in self.encoders],
            "bottleneck_filters": self.bottleneck_channels,
            "downsample": "maxpool2x2",
            "upsample": "convtranspose2x2",
        }

    def logits(self, x: torch.Tensor, zero_skips: tuple[int, ...] = ()) -> torch.Tensor:
        """Pre-sigmoid map; ``zero_skips`` lists encoder levels whose skip is ablated."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected input of shape (N, 1, H, W), got {tuple(x.shape)}")
        check_resolution(x.shape[2:], self.spec.depth)
        skips = []
        for level, enc in enumerate(self.encoders):
            x = enc(x)
            skips.append(torch.zeros_like(x) if level in zero_skips else x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(up(x), skip)
        return self.head(x)

    def forward(self, x: torch.Tensor, zero_skips: tuple[int, ...] = ()) -> torch.Tensor:
        return torch.sigmoid(self.logits(x, zero_skips))


def build_segmenter(spec: SegmenterSpec, seed: int = 0) -> ResUNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ResUNet(spec)


@dataclass(frozen=True)
class SegmentationMask:
    pixels: np.ndarray
    threshold_used: float = 0.5

    @property
    def shape(self) -> tuple[int, ...]:
        return self.pixels.shape


def threshold_map(prob: np.ndarray, threshold: float = 0.5) -> SegmentationMask:
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return SegmentationMask((np.asarray(prob) >= threshold).astype(np.uint8), float(threshold))


@torch.no_grad()
def predict_probability_map(model: ResUNet, img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {arr.shape}")
    was_training = model.training
    model.eval()
    try:
        return model(torch.from_numpy(arr)[None, None])[0, 0].numpy()
    finally:
        model.train(was_training)


def predict_mask(model: ResUNet, img: np.ndarray, threshold: float = 0.5) -> SegmentationMask:
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return threshold_map(predict_probability_map(model, img), threshold)


# ------------------------------------------------------------------ checkpoints


def save_segmenter(model: ResUNet, directory: str | Path, threshold: float = 0.5, **extra) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / "params.pt")
    meta = {
        "model": "segmenter",
        "spec": model.spec.to_dict(),
        "input_size": list(model.input_size),
        "threshold": threshold,
        "architecture": model.architecture(),
        **extra,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_segmenter(directory: str | Path) -> ResUNet:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no segmenter checkpoint at {directory}")
    meta = json.loads(meta_path.read_text())
    if meta.get("model") != "segmenter":
        raise ValueError(f"{directory} holds a {meta.get('model')!r} checkpoint, not a segmenter")
    model = ResUNet(SegmenterSpec.from_dict(meta["spec"]))
    model.load_state_dict(torch.load(directory / "params.pt", map_location="cpu"))
    model.eval()
    return model
