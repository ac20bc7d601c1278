"""Per-attribute classifier: frozen convolutional backbone plus a small trainable head."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torchvision
from torch import nn
from torch.nn import functional as F

from .errors import EmptyDataset, InvalidClassCount, LabelOutOfRange, ShapeMismatch
from .metrics import PredictionDump
from .preprocess import CANONICAL_SHAPE

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class LayerSpec:
    kind: str                      # "global_avg_pool" | "dense" | "dropout"
    units: int | None = None
    activation: str | None = None
    rate: float | None = None


@dataclass(frozen=True)
class HeadSpec:
    layers: tuple[LayerSpec, ...]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].units


def build_attribute_head(num_classes: int) -> HeadSpec:
    if num_classes < 2:
        raise InvalidClassCount(f"need at least 2 classes, got {num_classes}")
    return HeadSpec((
        LayerSpec("global_avg_pool"),
        LayerSpec("dense", 1024, "relu"),
        LayerSpec("dropout", rate=0.5),
        LayerSpec("dense", 512, "relu"),
        LayerSpec("dense", num_classes, "softmax"),
    ))


def head_module(spec: HeadSpec, in_channels: int) -> nn.Sequential:
    """Torch layers for ``spec``. The final softmax is left to the loss / ``predict``."""
    layers: list[nn.Module] = []
    width = in_channels
    for layer in spec.layers:
        if layer.kind == "global_avg_pool":
            layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        elif layer.kind == "dropout":
            layers.append(nn.Dropout(layer.rate))
        elif layer.kind == "dense":
            layers.append(nn.Linear(width, layer.units))
            width = layer.units
            if layer.activation == "relu":
                layers.append(nn.ReLU())
            elif layer.activation not in ("softmax", None):
                raise ValueError(f"unsupported activation {layer.activation!r}")
        else:
            raise ValueError(f"unsupported layer kind {layer.kind!r}")
    return nn.Sequential(*layers)


# backbones --------------------------------------------------------------------

def _inception_features(pretrained: bool) -> tuple[nn.Module, int]:
    weights = "IMAGENET1K_V1" if pretrained else None
    net = torchvision.models.inception_v3(weights=weights, aux_logits=pretrained, init_weights=not pretrained)
    parts = [net.Conv2d_1a_3x3, net.Conv2d_2a_3x3, net.Conv2d_2b_3x3, net.maxpool1, net.Conv2d_3b_1x1,
             net.Conv2d_4a_3x3, net.maxpool2, net.Mixed_5b, net.Mixed_5c, net.Mixed_5d, net.Mixed_6a,
             net.Mixed_6b, net.Mixed_6c, net.Mixed_6d, net.Mixed_6e, net.Mixed_7a, net.Mixed_7b, net.Mixed_7c]
    return nn.Sequential(*parts), 2048


def _resnet18_features(pretrained: bool) -> tuple[nn.Module, int]:
    net = torchvision.models.resnet18(weights="IMAGENET1K_V1" if pretrained else None)
    return nn.Sequential(*list(net.children())[:-2]), 512


def _tiny_features(pretrained: bool) -> tuple[nn.Module, int]:
    if pretrained:
        raise ValueError("the 'tiny' backbone has no pretrained weights")
    return nn.Sequential(
        nn.Conv2d(3, 16, 3, 2, 1), nn.BatchNorm2d(16), nn.ReLU(),
        nn.Conv2d(16, 32, 3, 2, 1), nn.BatchNorm2d(32), nn.ReLU(),
        nn.Conv2d(32, 64, 3, 2, 1), nn.BatchNorm2d(64), nn.ReLU(),
    ), 64


BACKBONES = {"inception_v3": _inception_features, "resnet18": _resnet18_features, "tiny": _tiny_features}


@dataclass(frozen=True)
class ClassifierTrainConfig:
    batch: int = 64
    epochs: int = 25
    lr: float = 1e-4
    momentum: float = 0.9
    seed: int = 0
    backbone: str = "inception_v3"
    pretrained: bool = True
    input_size: int | None = None     # upscale inputs to this size before the backbone
    keep: str = "final"               # or "best_val"

    def __post_init__(self):
        if self.batch < 1 or self.epochs < 1 or self.lr <= 0 or self.momentum < 0:
            raise ValueError(f"invalid classifier config {self}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {sorted(BACKBONES)}")
        if self.keep not in ("final", "best_val"):
            raise ValueError("keep must be 'final' or 'best_val'")


class AttributeClassifier(nn.Module):
    def __init__(self, num_classes: int, backbone: str = "inception_v3", pretrained: bool = True,
                 input_size: int | None = None, image_shape=CANONICAL_SHAPE):
        super().__init__()
        self.backbone_id = backbone
        self.image_shape = tuple(image_shape)
        self.input_size = input_size
        self.normalize = backbone != "tiny"
        self.backbone, channels = BACKBONES[backbone](pretrained)
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.head_spec = build_attribute_head(num_classes)
        self.head = head_module(self.head_spec, channels)
        self.register_buffer("_mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("_std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()   # frozen: batch-norm statistics must not move either
        return self

    def features(self, images: np.ndarray | torch.Tensor) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(images, dtype=np.float32)) if not isinstance(images, torch.Tensor) else images
        if tuple(x.shape[1:]) != self.image_shape:
            raise ShapeMismatch(f"expected images of shape {self.image_shape}, got {tuple(x.shape[1:])}")
        x = x.permute(0, 3, 1, 2)
        if self.input_size is not None and x.shape[-1] != self.input_size:
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        if self.normalize:
            x = (x - self._mean) / self._std
        with torch.no_grad():
            return self.backbone(x)

    def forward(self, images) -> torch.Tensor:
        return self.head(self.features(images))


def calibrate_batchnorm(model: AttributeClassifier, images: np.ndarray, batch: int = 256) -> None:
    """Set the backbone's batch-norm running statistics from ``images``.

    A randomly initialised backbone carries placeholder statistics (mean 0,
    variance 1), so its eval-mode features are badly scaled. One pass in
    train mode with cumulative averaging fixes them; nothing else changes.
    """
    norms = [m for m in model.backbone.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not norms:
        return
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    model.backbone.train()
    try:
        for i in range(0, len(images), batch):
            model.features(images[i:i + batch])
    finally:
        for m, momentum in zip(norms, saved):
            m.momentum = momentum
        model.backbone.eval()


def backbone_checksum(model: AttributeClassifier) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.backbone.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainedClassifier:
    model: AttributeClassifier
    config: ClassifierTrainConfig
    classes: list[str]
    history: list[dict] = field(default_factory=list)
    initial_train_loss: float = float("nan")
    initial_backbone_checksum: str = ""

    def save(self, path: str | Path) -> None:
        torch.save({
            "backbone_id": self.model.backbone_id,
            "backbone": self.model.backbone.state_dict(),
            "head": self.model.head.state_dict(),
            "config": dataclasses.asdict(self.config),
            "classes": self.classes,
            "history": self.history,
            "image_shape": self.model.image_shape,
        }, path)

    @classmethod
    def load(cls, path: str | Path) -> "TrainedClassifier":
        blob = torch.load(path, weights_only=False)
        config = ClassifierTrainConfig(**blob["config"])
        model = AttributeClassifier(len(blob["classes"]), config.backbone, False, config.input_size,
                                    blob["image_shape"])
        model.backbone.load_state_dict(blob["backbone"])
        model.head.load_state_dict(blob["head"])
        model.eval()
        return cls(model, config, list(blob["classes"]), list(blob["history"]))


def _batched_features(model: AttributeClassifier, images: np.ndarray, batch: int = 256) -> torch.Tensor:
    return torch.cat([model.features(images[i:i + batch]) for i in range(0, len(images), batch)])


def _check_labels(labels, num_classes, name):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRange(f"{name} labels must lie in [0, {num_classes})")
    return torch.as_tensor(labels)


def train_classifier(train_images: np.ndarray, train_labels: Sequence[int], val_images: np.ndarray,
                     val_labels: Sequence[int], classes: Sequence[str],
                     config: ClassifierTrainConfig = ClassifierTrainConfig(),
                     image_shape=CANONICAL_SHAPE) -> TrainedClassifier:
    """Train the head with SGD + momentum on categorical cross-entropy; the backbone stays frozen.

    Backbone features are computed once up front since they cannot change.
    Without pretrained weights the batch-norm statistics are first calibrated
    on the training images; the backbone is frozen from then on.
    Each history entry holds the epoch's mean train loss (dropout on), and the
    validation loss and accuracy.
    """
    if len(train_images) == 0 or len(val_images) == 0:
        raise EmptyDataset("train and validation sets must be nonempty")
    classes = list(classes)
    y_train = _check_labels(train_labels, len(classes), "train")
    y_val = _check_labels(val_labels, len(classes), "validation")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    model = AttributeClassifier(len(classes), config.backbone, config.pretrained, config.input_size, image_shape)
    if not config.pretrained:
        calibrate_batchnorm(model, np.asarray(train_images, dtype=np.float32))
    model.train()
    checksum = backbone_checksum(model)
    f_train = _batched_features(model, np.asarray(train_images, dtype=np.float32))
    f_val = _batched_features(model, np.asarray(val_images, dtype=np.float32))
    opt = torch.optim.SGD(model.head.parameters(), lr=config.lr, momentum=config.momentum)

    def evaluate(feats, y):
        model.head.eval()
        with torch.no_grad():
            logits = model.head(feats)
        model.head.train()
        return float(F.cross_entropy(logits, y)), float((logits.argmax(1) == y).double().mean())

    trained = TrainedClassifier(model, config, classes, initial_train_loss=evaluate(f_train, y_train)[0],
                                initial_backbone_checksum=checksum)
    best_state, best_val = None, float("inf")
    for epoch in range(config.epochs):
        order = torch.randperm(len(f_train), generator=gen)
        total = 0.0
        for start in range(0, len(order), config.batch):
            idx = order[start:start + config.batch]
            loss = F.cross_entropy(model.head(f_train[idx]), y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        val_loss, val_acc = evaluate(f_val, y_val)
        trained.history.append({"epoch": epoch + 1, "train_loss": total / len(order),
                                "val_loss": val_loss, "val_accuracy": val_acc})
        log.info("classifier epoch %d/%d train %.4f val %.4f acc %.4f",
                 epoch + 1, config.epochs, total / len(order), val_loss, val_acc)
        if config.keep == "best_val" and val_loss < best_val:
            best_val = val_loss
            best_state = {k: v.clone() for k, v in model.head.state_dict().items()}
    if best_state is not None:
        model.head.load_state_dict(best_state)
    model.eval()
    return trained


def predict(images: np.ndarray, trained: TrainedClassifier | AttributeClassifier, batch: int = 256) -> np.ndarray:
    """Softmax probabilities, one row per image, computed in inference mode."""
    model = trained.model if isinstance(trained, TrainedClassifier) else trained
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise ShapeMismatch(f"expected a batch of HxWx3 images, got shape {images.shape}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = [F.softmax(model(images[i:i + batch]).double(), dim=1) for i in range(0, len(images), batch)]
    model.train(was_training)
    return torch.cat(out).numpy() if out else np.zeros((0, model.head_spec.num_classes))


def prediction_dump(trained: TrainedClassifier, images: np.ndarray, image_ids: Sequence[str],
                    true_labels: Sequence[str], attribute: str, model_id: str, dataset_id: str) -> PredictionDump:
    probs = predict(images, trained)
    preds = [trained.classes[i] for i in probs.argmax(axis=1)]
    return PredictionDump(model_id, dataset_id, attribute, list(trained.classes), list(image_ids),
                          list(true_labels), preds, probs)
