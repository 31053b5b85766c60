"""Patch embedding extraction with torchvision backbones, writing .bag files."""

from .bagfile import RoundtripReport, verify_roundtrip, write_bag
from .backbones import BACKBONES, build_feature_extractor
from .embed import EmbedJob, PatchSpec, embed_patches, read_coords_csv
from .errors import EmbedderError, SetupError, ValidationError

__all__ = [
    "BACKBONES",
    "EmbedJob",
    "EmbedderError",
    "PatchSpec",
    "RoundtripReport",
    "SetupError",
    "ValidationError",
    "build_feature_extractor",
    "embed_patches",
    "read_coords_csv",
    "verify_roundtrip",
    "write_bag",
]
