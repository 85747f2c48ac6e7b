"""Slice classifiers and their training/evaluation loop.

Three presets share a one-channel input and a two-logit head:

* ``tiny``: three stride-2 conv/ReLU stages into a flattened linear
  head; small enough for fast desk-scale experiments.
* ``alexnet-like``: five conv stages with max pooling and a three-layer
  fully connected head behind dropout.
* ``vgg19-like``: five blocks of 2/2/4/4/4 convolutions with max
  pooling between blocks and a compact fully connected head.

Training is plain cross-entropy with Adam; everything (init, batch
order, updates) is a deterministic function of the config seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .manifest import DatasetManifest
from .metrics import EvalReport, report_from_scores
from .pipeline import DataPipelineConfig, load_stack

PRESETS = ("tiny", "alexnet-like", "vgg19-like")


class ClassifierError(ValueError):
    """Bad classifier spec, degenerate training data, or diverged loss."""


@dataclass(frozen=True)
class ClassifierSpec:
    preset: str = "tiny"
    input_side: int = 64
    class_count: int = 2

    def __post_init__(self) -> None:
        if self.preset not in PRESETS:
            raise ClassifierError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        minimum = 16 if self.preset == "tiny" else 32
        if self.input_side < minimum:
            raise ClassifierError(
                f"{self.preset} needs input_side >= {minimum}, got {self.input_side}"
            )
        if self.class_count != 2:
            raise ClassifierError("only binary classification is supported")


@dataclass(frozen=True)
class ClassifierTrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-5
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ClassifierError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ClassifierError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ClassifierError("batch_size must be >= 1")


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)


def _tiny(spec: ClassifierSpec) -> nn.Module:
    # batch norm keeps the stages alive on masked slices, whose pixels
    # cluster tightly near the background value; the head flattens the
    # final feature map instead of pooling it away, because the lesions
    # of interest cover only tens of pixels and a global average would
    # dilute them below the noise floor
    side = spec.input_side
    for _ in range(3):
        side = (side + 1) // 2
    return nn.Sequential(
        nn.Conv2d(1, 8, 3, stride=2, padding=1),
        nn.BatchNorm2d(8),
        nn.ReLU(inplace=True),
        nn.Conv2d(8, 16, 3, stride=2, padding=1),
        nn.BatchNorm2d(16),
        nn.ReLU(inplace=True),
        nn.Conv2d(16, 32, 3, stride=2, padding=1),
        nn.BatchNorm2d(32),
        nn.ReLU(inplace=True),
        nn.Flatten(),
        nn.Linear(32 * side * side, spec.class_count),
    )


def _alexnet_like(spec: ClassifierSpec) -> nn.Module:
    return nn.Sequential(
        nn.Conv2d(1, 64, 5, stride=2, padding=2),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(3, stride=2, padding=1),
        nn.Conv2d(64, 192, 5, stride=1, padding=2),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(3, stride=2, padding=1),
        nn.Conv2d(192, 384, 3, stride=1, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(384, 256, 3, stride=1, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(256, 256, 3, stride=1, padding=1),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(3, stride=2, padding=1),
        nn.AdaptiveAvgPool2d(3),
        nn.Flatten(),
        nn.Dropout(0.5),
        nn.Linear(256 * 9, 1024),
        nn.ReLU(inplace=True),
        nn.Dropout(0.5),
        nn.Linear(1024, 1024),
        nn.ReLU(inplace=True),
        nn.Linear(1024, spec.class_count),
    )


def _vgg19_like(spec: ClassifierSpec) -> nn.Module:
    widths = (64, 128, 256, 512, 512)
    repeats = (2, 2, 4, 4, 4)
    layers: list[nn.Module] = []
    prev = 1
    for width, reps in zip(widths, repeats):
        for _ in range(reps):
            layers += [nn.Conv2d(prev, width, 3, stride=1, padding=1), nn.ReLU(inplace=True)]
            prev = width
        layers.append(nn.MaxPool2d(2, stride=2))
    layers += [
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(512, 512),
        nn.ReLU(inplace=True),
        nn.Dropout(0.5),
        nn.Linear(512, 512),
        nn.ReLU(inplace=True),
        nn.Linear(512, spec.class_count),
    ]
    return nn.Sequential(*layers)


_BUILDERS = {"tiny": _tiny, "alexnet-like": _alexnet_like, "vgg19-like": _vgg19_like}


def build_classifier(spec: ClassifierSpec, seed: int) -> nn.Module:
    net = _BUILDERS[spec.preset](spec)
    # no batch norm in these presets, so weights need fan-in scaling or
    # activations collapse through the stacked ReLU stages
    gen = torch.Generator().manual_seed(int(seed))
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            m.weight.data.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
            m.bias.data.zero_()
        elif isinstance(m, nn.Linear):
            m.weight.data.normal_(0.0, (2.0 / m.in_features) ** 0.5, generator=gen)
            m.bias.data.zero_()
    return net


def train_classifier(
    spec: ClassifierSpec,
    train_manifest: DatasetManifest,
    cfg: ClassifierTrainConfig,
    pipe: DataPipelineConfig,
) -> tuple[nn.Module, TrainHistory]:
    """Fit a preset classifier; returns the model in eval mode."""
    if pipe.side != spec.input_side:
        raise ClassifierError(
            f"pipeline side {pipe.side} != classifier input side {spec.input_side}"
        )
    images, labels = load_stack(train_manifest, pipe)
    if len(np.unique(labels)) < 2:
        raise ClassifierError("training manifest must contain both classes")
    torch.manual_seed(cfg.seed)
    model = build_classifier(spec, cfg.seed)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    criterion = nn.CrossEntropyLoss()
    x = torch.from_numpy(images)
    t = torch.from_numpy(labels)
    rng = np.random.default_rng([cfg.seed, 29])
    history = TrainHistory()
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(x))
        epoch_loss = 0.0
        correct = 0
        for start in range(0, len(x), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            logits = model(x[idx])
            loss = criterion(logits, t[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            value = float(loss.item())
            if not np.isfinite(value):
                raise ClassifierError("training loss became non-finite")
            epoch_loss += value * len(idx)
            correct += int((logits.argmax(dim=1) == t[idx]).sum())
        history.losses.append(epoch_loss / len(x))
        history.accuracies.append(correct / len(x))
    model.eval()
    return model, history


def predict_logits(
    model: nn.Module,
    manifest: DatasetManifest,
    pipe: DataPipelineConfig,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    images, labels = load_stack(manifest, pipe)
    model.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = torch.from_numpy(images[start : start + batch_size])
            outputs.append(model(chunk).numpy())
    return np.concatenate(outputs, axis=0), labels


def evaluate_classifier(
    model: nn.Module,
    test_manifest: DatasetManifest,
    pipe: DataPipelineConfig,
) -> EvalReport:
    """Accuracy, confusion counts, ROC, and AUC on a manifest."""
    logits, labels = predict_logits(model, test_manifest, pipe)
    predictions = logits.argmax(axis=1)
    scores = logits[:, 1] - logits[:, 0]
    return report_from_scores(scores, predictions, labels)
