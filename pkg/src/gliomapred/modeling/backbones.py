"""Backbone registry.

Each entry builds a convolutional trunk returning a feature map; pooling is
done by the fusion model. Input scaling follows each family's canonical
transform: ImageNet mean/std for torchvision models, ``[-1, 1]`` for the timm
Inception-ResNet-v2, ``(x - 0.5) / 0.25`` for ``tiny_test``.

Pretrained weights go through the usual torch hub / Hugging Face caches.
``GLIOMAPRED_WEIGHTS_DIR`` overrides the cache root, and
``GLIOMAPRED_OFFLINE=1`` makes a missing cached file an immediate error.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch
from torch import nn

WEIGHTS_ENV = "GLIOMAPRED_WEIGHTS_DIR"
OFFLINE_ENV = "GLIOMAPRED_OFFLINE"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class UnknownBackboneError(KeyError):
    pass


class WeightsUnavailableError(RuntimeError):
    pass


class InputTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    id: str
    feature_dim: int
    weights: str = "random"  # or "pretrained_imagenet"
    trainable: bool = False

    def __post_init__(self):
        entry = get_entry(self.id)
        if self.feature_dim != entry.feature_dim:
            raise ValueError(
                f"{self.id} pools to {entry.feature_dim} features, not {self.feature_dim}"
            )
        if self.weights not in ("random", "pretrained_imagenet"):
            raise ValueError(f"unknown weights option {self.weights!r}")

    @classmethod
    def of(cls, backbone_id: str, weights: str = "random", trainable: bool = False):
        return cls(backbone_id, get_entry(backbone_id).feature_dim, weights, trainable)


class Normalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


@dataclass(frozen=True)
class RegistryEntry:
    feature_dim: int
    build: Callable[[bool], nn.Module]
    transform: Callable[[], nn.Module]
    min_size: int = 32
    in_study: bool = True


def _imagenet():
    return Normalize(IMAGENET_MEAN, IMAGENET_STD)


def _centred():
    return Normalize((0.5, 0.5, 0.5), (0.25, 0.25, 0.25))


def _symmetric():
    return Normalize((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))


def _torchvision(name: str, weights_enum: str, trunk: Callable[[nn.Module], nn.Module]):
    def build(pretrained: bool) -> nn.Module:
        import torchvision.models as tvm

        kwargs = {}
        if name == "inception_v3":
            # pretrained weights ship with the auxiliary head; the trunk ignores it
            kwargs = {"aux_logits": pretrained, "init_weights": not pretrained}
        weights = getattr(tvm, weights_enum).DEFAULT if pretrained else None
        if weights is not None:
            _check_offline(weights.url.rsplit("/", 1)[-1])
        model = getattr(tvm, name)(weights=weights, **kwargs)
        return trunk(model)

    return build


def _resnet_trunk(m):
    return nn.Sequential(*list(m.children())[:-2])


def _densenet_trunk(m):
    return nn.Sequential(m.features, nn.ReLU(inplace=False))


def _features_trunk(m):
    return m.features


def _inception_v3_trunk(m):
    names = [
        "Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3", "maxpool1",
        "Conv2d_3b_1x1", "Conv2d_4a_3x3", "maxpool2",
        "Mixed_5b", "Mixed_5c", "Mixed_5d", "Mixed_6a", "Mixed_6b", "Mixed_6c",
        "Mixed_6d", "Mixed_6e", "Mixed_7a", "Mixed_7b", "Mixed_7c",
    ]
    return nn.Sequential(*[getattr(m, n) for n in names])


class _TimmTrunk(nn.Module):
    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward(self, x):
        return self.model.forward_features(x)


def _build_inception_resnet_v2(pretrained: bool) -> nn.Module:
    try:
        import timm
    except ImportError as exc:  # pragma: no cover
        raise WeightsUnavailableError("inception_resnet_v2 requires the timm package") from exc
    if pretrained and os.environ.get(OFFLINE_ENV) == "1":
        os.environ.setdefault("HF_HUB_OFFLINE", "1")
    try:
        model = timm.create_model("inception_resnet_v2", pretrained=pretrained, num_classes=0)
    except Exception as exc:
        if pretrained:
            raise WeightsUnavailableError(f"could not load inception_resnet_v2 weights: {exc}") from exc
        raise
    return _TimmTrunk(model)


class TinyTestTrunk(nn.Module):
    """Three conv stages, 32 output channels; for fast tests only."""

    def __init__(self):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 8, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(8, 16, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.ReLU(),
        )
        # He init keeps activation scale through the random stack; the default
        # init shrinks it until the biases dominate the pooled features
        for m in self.body:
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x):
        return self.body(x)


def _build_tiny(pretrained: bool) -> nn.Module:
    if pretrained:
        raise WeightsUnavailableError("tiny_test has no pretrained weights")
    return TinyTestTrunk()


REGISTRY: dict[str, RegistryEntry] = {
    "resnet50": RegistryEntry(
        2048, _torchvision("resnet50", "ResNet50_Weights", _resnet_trunk), _imagenet),
    "resnet101": RegistryEntry(
        2048, _torchvision("resnet101", "ResNet101_Weights", _resnet_trunk), _imagenet),
    "efficientnet_b4": RegistryEntry(
        1792, _torchvision("efficientnet_b4", "EfficientNet_B4_Weights", _features_trunk), _imagenet),
    "vgg16": RegistryEntry(
        512, _torchvision("vgg16", "VGG16_Weights", _features_trunk), _imagenet),
    "inception_v3": RegistryEntry(
        2048, _torchvision("inception_v3", "Inception_V3_Weights", _inception_v3_trunk),
        _imagenet, min_size=75),
    "inception_resnet_v2": RegistryEntry(
        1536, _build_inception_resnet_v2, _symmetric, min_size=75),
    "densenet121": RegistryEntry(
        1024, _torchvision("densenet121", "DenseNet121_Weights", _densenet_trunk), _imagenet),
    "densenet201": RegistryEntry(
        1920, _torchvision("densenet201", "DenseNet201_Weights", _densenet_trunk), _imagenet),
    "tiny_test": RegistryEntry(32, _build_tiny, _centred, min_size=4, in_study=False),
}


def get_entry(backbone_id: str) -> RegistryEntry:
    try:
        return REGISTRY[backbone_id]
    except KeyError:
        raise UnknownBackboneError(
            f"unknown backbone {backbone_id!r}; registered: {sorted(REGISTRY)}"
        ) from None


def study_backbones() -> list[str]:
    return [k for k, v in REGISTRY.items() if v.in_study]


def weights_dir() -> Path:
    root = os.environ.get(WEIGHTS_ENV)
    if root:
        return Path(root)
    return Path(torch.hub.get_dir())


def _check_offline(filename: str) -> None:
    if os.environ.get(WEIGHTS_ENV):
        torch.hub.set_dir(os.environ[WEIGHTS_ENV])
    if os.environ.get(OFFLINE_ENV) != "1":
        return
    cached = Path(torch.hub.get_dir()) / "checkpoints" / filename
    if not cached.exists():
        raise WeightsUnavailableError(
            f"offline mode: pretrained weights {filename} not found in {cached.parent}"
        )


def build_trunk(spec: BackboneSpec) -> tuple[nn.Module, nn.Module]:
    """(input transform, feature-map trunk) for ``spec``."""
    entry = get_entry(spec.id)
    trunk = entry.build(spec.weights == "pretrained_imagenet")
    return entry.transform(), trunk
