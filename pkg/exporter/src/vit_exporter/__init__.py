"""Export class-token features from frozen vision transformers.

The output is a set of packed feature files plus a stream manifest that
the msdem training engine consumes as-is, so desk-scale real-image runs
use the exact pipeline the synthetic streams do.
"""

from __future__ import annotations

import os
from pathlib import Path

from .backbones import (
    BackboneInfo,
    available_backbones,
    get_backbone,
    load_backbone,
    register_backbone,
    unregister_backbone,
)
from .datasets import discover_classes, scan_images
from .errors import ExportError
from .export import ExportJob, export_features, export_stream, make_manifest

__all__ = [
    "BackboneInfo",
    "ExportError",
    "ExportJob",
    "available_backbones",
    "default_cache_dir",
    "discover_classes",
    "export_features",
    "export_stream",
    "get_backbone",
    "load_backbone",
    "make_manifest",
    "register_backbone",
    "scan_images",
    "unregister_backbone",
]


def default_cache_dir() -> Path:
    """Where exports land when no --out is given (override: VIT_EXPORTER_CACHE)."""
    env = os.environ.get("VIT_EXPORTER_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "vit_exporter"
