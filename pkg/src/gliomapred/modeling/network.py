"""Dual-input fusion network: backbone -> GAP -> concat(tabular) -> dense head."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .. import defaults
from .backbones import BackboneSpec, InputTooSmallError, build_trunk, get_entry

ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh}


@dataclass(frozen=True)
class HeadConfig:
    bn_layers: int = defaults.BN_LAYERS
    neurons_1: int = defaults.NEURONS_1
    neurons_2: int = defaults.NEURONS_2
    dropout_rate: float = defaults.DROPOUT
    activation: str = defaults.ACTIVATION

    def __post_init__(self):
        if self.bn_layers not in (0, 1, 2):
            raise ValueError(f"bn_layers must be 0, 1 or 2, got {self.bn_layers}")
        if self.neurons_1 < 1 or self.neurons_2 < 1:
            raise ValueError("dense layer widths must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")


def make_head(in_features: int, head: HeadConfig, n_classes: int) -> nn.Sequential:
    """dense1 -> [BN] -> dense2 -> [BN] -> dropout -> logits.

    With one BN layer it follows the first dense layer; with two, one follows
    each dense layer.
    """
    act = ACTIVATIONS[head.activation]
    layers: list[nn.Module] = [nn.Linear(in_features, head.neurons_1), act()]
    if head.bn_layers >= 1:
        layers.append(nn.BatchNorm1d(head.neurons_1))
    layers += [nn.Linear(head.neurons_1, head.neurons_2), act()]
    if head.bn_layers == 2:
        layers.append(nn.BatchNorm1d(head.neurons_2))
    layers += [nn.Dropout(head.dropout_rate), nn.Linear(head.neurons_2, n_classes)]
    return nn.Sequential(*layers)


class FusionModel(nn.Module):
    """Image + tabular classifier. ``forward`` returns logits."""

    def __init__(self, backbone: BackboneSpec, head: HeadConfig, n_classes: int,
                 tabular_width: int, seed: int = 0):
        super().__init__()
        if n_classes not in (2, 3):
            raise ValueError(f"n_classes must be 2 or 3, got {n_classes}")
        if tabular_width <= 0:
            raise ValueError(f"tabular_width must be positive, got {tabular_width}")
        self.backbone_spec = backbone
        self.head_config = head
        self.n_classes = n_classes
        self.tabular_width = tabular_width
        self.seed = seed
        self.min_size = get_entry(backbone.id).min_size

        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.transform, self.trunk = build_trunk(backbone)
            self.pool = nn.AdaptiveAvgPool2d(1)
            self.head = make_head(backbone.feature_dim + tabular_width, head, n_classes)
        finally:
            torch.random.set_rng_state(gen_state)
        self.set_backbone_trainable(backbone.trainable)

    @property
    def task(self) -> str:
        return "grade" if self.n_classes == 2 else "survival"

    @property
    def fused_width(self) -> int:
        return self.backbone_spec.feature_dim + self.tabular_width

    @property
    def frozen(self) -> bool:
        return not self.backbone_spec.trainable

    def set_backbone_trainable(self, trainable: bool):
        for p in self.trunk.parameters():
            p.requires_grad_(trainable)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen:
            # frozen trunks run in inference mode (fixed BN statistics)
            self.trunk.eval()
        return self

    def check_images(self, images: torch.Tensor):
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected N x 3 x H x W images, got {tuple(images.shape)}")
        if min(images.shape[2:]) < self.min_size:
            raise InputTooSmallError(
                f"{self.backbone_spec.id} needs inputs of at least {self.min_size}px, "
                f"got {tuple(images.shape[2:])}"
            )

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Globally pooled backbone features, ``N x feature_dim``."""
        self.check_images(images)
        fmap = self.trunk(self.transform(images))
        return self.pool(fmap).flatten(1)

    def head_logits(self, features: torch.Tensor, tabular: torch.Tensor) -> torch.Tensor:
        return self.head(torch.cat([features, tabular], dim=1))

    def forward(self, images: torch.Tensor, tabular: torch.Tensor) -> torch.Tensor:
        return self.head_logits(self.features(images), tabular)

    def predict_proba(self, images, tabular) -> torch.Tensor:
        return torch.softmax(self.forward(images, tabular), dim=1)


def build_model(backbone: BackboneSpec, head: HeadConfig, n_classes: int,
                tabular_width: int, seed: int = 0) -> FusionModel:
    """Construct the fusion network; trunk and head are initialized from ``seed``."""
    return FusionModel(backbone, head, n_classes, tabular_width, seed)
