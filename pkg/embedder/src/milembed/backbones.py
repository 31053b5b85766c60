"""Torchvision backbone registry and pooled-feature extraction."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torchvision import models

from .errors import SetupError, ValidationError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
INPUT_SIZE = 224


@dataclass(frozen=True)
class BackboneSpec:
    model_name: str      # torchvision registry name
    head_attr: str       # attribute holding the classifier to remove
    width: int           # native pooled-feature width
    tapped: str          # human-readable description of the tapped layer


BACKBONES: dict[str, BackboneSpec] = {
    "resnet34": BackboneSpec("resnet34", "fc", 512, "global average pool before fc"),
    "resnet50": BackboneSpec("resnet50", "fc", 2048, "global average pool before fc"),
    "regnet_y_1_6gf": BackboneSpec("regnet_y_1_6gf", "fc", 888, "global average pool before fc"),
    "convnext_tiny": BackboneSpec(
        "convnext_tiny", "classifier", 768, "pooled LayerNorm features before final linear"
    ),
    "efficientnet_b0": BackboneSpec(
        "efficientnet_b0", "classifier", 1280, "global average pool before classifier"
    ),
    "swin_t": BackboneSpec("swin_t", "head", 768, "global average pool before head"),
}


def _strip_head(model: nn.Module, head_attr: str) -> None:
    head = getattr(model, head_attr)
    if isinstance(head, nn.Linear):
        setattr(model, head_attr, nn.Identity())
        return
    if isinstance(head, nn.Sequential):
        # replace only the last linear so pooling/norm layers keep running
        for i in range(len(head) - 1, -1, -1):
            if isinstance(head[i], nn.Linear):
                head[i] = nn.Identity()
                return
    raise SetupError(f"no linear layer found under {head_attr!r}")


def build_feature_extractor(
    name: str, weights: str = "none", seed: int = 0, device: str = "cpu"
) -> tuple[nn.Module, BackboneSpec]:
    """Construct an eval-mode backbone whose forward emits pooled features.

    weights "none" seeds torch and initializes randomly, which needs no
    network access; "pretrained" asks torchvision for its default weights
    and turns a failed download into SetupError.
    """
    if name not in BACKBONES:
        known = ", ".join(sorted(BACKBONES))
        raise ValidationError(f"unknown backbone {name!r}; choose one of: {known}")
    if weights not in ("none", "pretrained"):
        raise ValidationError(f"weights must be 'none' or 'pretrained', got {weights!r}")
    spec = BACKBONES[name]
    if weights == "none":
        torch.manual_seed(seed)
        model = models.get_model(spec.model_name, weights=None)
    else:
        try:
            model = models.get_model(spec.model_name, weights="DEFAULT")
        except Exception as exc:
            raise SetupError(
                f"pretrained weights for {name} unavailable ({exc}); "
                "use --weights none for an offline run"
            ) from exc
    _strip_head(model, spec.head_attr)
    model.eval()
    model.to(device)
    return model, spec


def preprocess(batch: torch.Tensor) -> torch.Tensor:
    """uint8 NHWC RGB -> normalized float NCHW at the network input size."""
    x = batch.permute(0, 3, 1, 2).float() / 255.0
    if x.shape[-2:] != (INPUT_SIZE, INPUT_SIZE):
        x = torch.nn.functional.interpolate(
            x, size=(INPUT_SIZE, INPUT_SIZE), mode="bilinear", align_corners=False
        )
    mean = torch.tensor(IMAGENET_MEAN, dtype=x.dtype).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=x.dtype).view(1, 3, 1, 1)
    return (x - mean) / std
