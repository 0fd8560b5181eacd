"""Four-class tumor classifier: frozen feature extractor + pooled dense head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from neuroscan.dataset import LABELS

BACKBONES = ("pretrained_b1", "tiny_cnn")


@dataclass(frozen=True)
class ClassifierSpec:
    backbone: str = "tiny_cnn"
    freeze_backbone: bool = True
    hidden_units: int = 512
    num_classes: int = 4
    dropout_rate: float = 0.4
    input_size: tuple[int, int] = (224, 224)
    # local state_dict for the pretrained backbone; None tries the torchvision hub
    weights_path: str | None = None

    def __post_init__(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.hidden_units < 1 or self.num_classes < 2:
            raise ValueError("hidden_units must be >= 1 and num_classes >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierSpec":
        d = dict(d)
        d["input_size"] = tuple(d.get("input_size", (224, 224)))
        return cls(**d)


class TinyCNN(nn.Module):
    """Small from-scratch backbone: three conv/ReLU/max-pool stages.

    Ends in a non-affine batch norm. When the backbone is frozen its running
    statistics are set once by :meth:`calibrate` and then stay fixed, which
    gives the head standardized features the way a pretrained extractor would.
    """

    in_channels = 1

    def __init__(self, widths: tuple[int, ...] = (32, 64, 128)) -> None:
        super().__init__()
        layers: list[nn.Module] = []
        prev = self.in_channels
        for w in widths:
            layers += [nn.Conv2d(prev, w, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            prev = w
        self.features = nn.Sequential(*layers)
        self.standardize = nn.BatchNorm2d(prev, affine=False)
        self.register_buffer("calibrated", torch.tensor(False))
        self.out_channels = prev

    @torch.no_grad()
    def calibrate(self, images: torch.Tensor, batch_size: int = 64) -> None:
        """Set feature statistics from ``images`` of shape (N, 1, H, W)."""
        total = sq = 0.0
        count = 0
        for start in range(0, len(images), batch_size):
            f = self.features(images[start : start + batch_size]).double()
            total = total + f.sum(dim=(0, 2, 3))
            sq = sq + (f * f).sum(dim=(0, 2, 3))
            count += f.shape[0] * f.shape[2] * f.shape[3]
        mean = total / count
        var = (sq / count - mean * mean).clamp_min(0.0)
        self.standardize.running_mean.copy_(mean.float())
        self.standardize.running_var.copy_(var.float())
        self.calibrated.fill_(True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.standardize(self.features(x))


class EfficientNetB1Backbone(nn.Module):
    in_channels = 3
    out_channels = 1280

    def __init__(self, weights_path: str | None = None, load_weights: bool = True) -> None:
        super().__init__()
        from torchvision.models import EfficientNet_B1_Weights, efficientnet_b1

        if not load_weights:
            net = efficientnet_b1(weights=None)
        elif weights_path is not None:
            net = efficientnet_b1(weights=None)
            net.load_state_dict(torch.load(weights_path, map_location="cpu"))
        else:
            try:
                net = efficientnet_b1(weights=EfficientNet_B1_Weights.IMAGENET1K_V1)
            except Exception as exc:
                raise RuntimeError(
                    "pretrained EfficientNet-B1 weights are not available offline; "
                    "pass weights_path or use backbone='tiny_cnn'"
                ) from exc
        self.features = net.features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)


class TumorClassifier(nn.Module):
    """Backbone -> global average pooling -> dense(512, ReLU) -> dropout -> dense(4) -> softmax.

    ``forward`` returns class probabilities of shape ``(N, num_classes)``.
    Inputs are ``(N, 1, H, W)``; the channel is replicated when the backbone
    expects RGB.
    """

    def __init__(self, spec: ClassifierSpec, load_weights: bool = True) -> None:
        super().__init__()
        self.spec = spec
        if spec.backbone == "tiny_cnn":
            self.backbone = TinyCNN()
        else:
            self.backbone = EfficientNetB1Backbone(spec.weights_path, load_weights=load_weights)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.hidden = nn.Linear(self.backbone.out_channels, spec.hidden_units)
        self.dropout = nn.Dropout(spec.dropout_rate)
        self.out = nn.Linear(spec.hidden_units, spec.num_classes)
        if spec.freeze_backbone:
            for p in self.backbone.parameters():
                p.requires_grad_(False)
            self.backbone.eval()

    def train(self, mode: bool = True) -> "TumorClassifier":
        super().train(mode)
        if self.spec.freeze_backbone:
            # keep any normalization statistics of a frozen backbone fixed
            self.backbone.eval()
        return self

    @property
    def head_widths(self) -> tuple[int, int]:
        return (self.hidden.out_features, self.out.out_features)

    @property
    def input_size(self) -> tuple[int, int]:
        return tuple(self.spec.input_size)

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected input of shape (N, 1, H, W), got {tuple(x.shape)}")
        if self.backbone.in_channels == 3:
            x = x.expand(-1, 3, -1, -1)
        feats = self.pool(self.backbone(x)).flatten(1)
        h = self.dropout(torch.relu(self.hidden(feats)))
        return self.out(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


def build_classifier(spec: ClassifierSpec, seed: int = 0) -> TumorClassifier:
    """Instantiate the classifier with parameters initialised from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return TumorClassifier(spec)


@dataclass(frozen=True)
class ClassProbabilities:
    probs: tuple[float, ...]
    class_order: tuple[str, ...] = LABELS

    @property
    def label(self) -> str:
        return self.class_order[int(np.argmax(self.probs))]

    def to_dict(self) -> dict[str, float]:
        return dict(zip(self.class_order, self.probs))


@torch.no_grad()
def predict_class(model: TumorClassifier, img: np.ndarray) -> ClassProbabilities:
    """Class probabilities for one preprocessed image (inference mode)."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.shape != model.input_size:
        raise ValueError(f"image shape {arr.shape} does not match model input {model.input_size}")
    was_training = model.training
    model.eval()
    try:
        probs = model(torch.from_numpy(arr)[None, None])[0].double().numpy()
    finally:
        model.train(was_training)
    return ClassProbabilities(probs=tuple(float(p) for p in probs), class_order=LABELS[: len(probs)])


# ------------------------------------------------------------------ checkpoints


def save_classifier(model: TumorClassifier, directory: str | Path, **extra) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / "params.pt")
    meta = {
        "model": "classifier",
        "spec": model.spec.to_dict(),
        "class_order": list(LABELS),
        "input_size": list(model.input_size),
        **extra,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_classifier(directory: str | Path) -> TumorClassifier:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no classifier checkpoint at {directory}")
    meta = json.loads(meta_path.read_text())
    if meta.get("model") != "classifier":
        raise ValueError(f"{directory} holds a {meta.get('model')!r} checkpoint, not a classifier")
    spec = ClassifierSpec.from_dict(meta["spec"])
    # parameters come from params.pt, never from the hub
    model = TumorClassifier(spec, load_weights=False)
    model.load_state_dict(torch.load(directory / "params.pt", map_location="cpu"))
    if spec.freeze_backbone:
        for p in model.backbone.parameters():
            p.requires_grad_(False)
    model.eval()
    return model
