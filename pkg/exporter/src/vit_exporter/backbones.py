"""Frozen backbone registry.

Each entry names a pretrained vision transformer and knows how to turn a
batch of PIL images into class-token feature vectors.  Weights load
lazily (and only once per process); everything runs under no_grad in
eval mode, so the extraction is deterministic.  Extra backbones can be
registered at runtime, which is how the tests inject a cheap stub that
needs no downloads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .errors import ExportError


class FeatureExtractor(Protocol):
    dim: int

    def extract(self, images: list) -> np.ndarray:
        """PIL images -> float32 array [len(images), dim]."""
        ...


@dataclass(frozen=True)
class BackboneInfo:
    name: str
    dim: int
    description: str
    factory: Callable[[str], FeatureExtractor]   # device -> extractor


class _HubExtractor:
    """Class-token features from a transformer vision encoder on the hub."""

    def __init__(self, hub_id: str, dim: int, device: str, vision_tower: bool):
        try:
            import torch
            import transformers
        except ImportError as e:
            raise ExportError(
                f"backbone {hub_id!r} needs the 'real' extra (torch + transformers): {e}"
            ) from None
        try:
            self._processor = transformers.AutoImageProcessor.from_pretrained(hub_id)
            if vision_tower:
                model = transformers.CLIPVisionModel.from_pretrained(hub_id)
            else:
                model = transformers.ViTModel.from_pretrained(hub_id)
        except Exception as e:
            raise ExportError(
                f"could not load pretrained weights {hub_id!r}: {e}; "
                "exporting real features needs access to the model hub (or a local cache)"
            ) from None
        self._torch = torch
        self._model = model.to(device).eval()
        for p in self._model.parameters():
            p.requires_grad_(False)
        self._device = device
        self.dim = dim

    def extract(self, images: list) -> np.ndarray:
        inputs = self._processor(images=images, return_tensors="pt").to(self._device)
        with self._torch.no_grad():
            out = self._model(**inputs)
        # first token of the final hidden state is the class token
        feats = out.last_hidden_state[:, 0, :].cpu().numpy().astype(np.float32)
        if feats.shape != (len(images), self.dim):
            raise ExportError(f"backbone returned shape {feats.shape}, expected ({len(images)}, {self.dim})")
        return feats


def _hub_factory(hub_id: str, dim: int, vision_tower: bool = False) -> Callable[[str], FeatureExtractor]:
    return lambda device: _HubExtractor(hub_id, dim, device, vision_tower)


_REGISTRY: dict[str, BackboneInfo] = {}


def register_backbone(name: str, dim: int, description: str,
                      factory: Callable[[str], FeatureExtractor]) -> BackboneInfo:
    if name in _REGISTRY:
        raise ExportError(f"backbone {name!r} is already registered")
    info = BackboneInfo(name=name, dim=dim, description=description, factory=factory)
    _REGISTRY[name] = info
    return info


def unregister_backbone(name: str) -> None:
    _REGISTRY.pop(name, None)


def available_backbones() -> list[str]:
    return sorted(_REGISTRY)


def get_backbone(name: str) -> BackboneInfo:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ExportError(
            f"unknown backbone {name!r}; available: {', '.join(available_backbones())}"
        ) from None


def load_backbone(name: str, device: str = "cpu") -> FeatureExtractor:
    info = get_backbone(name)
    extractor = info.factory(device)
    if extractor.dim != info.dim:
        raise ExportError(f"backbone {name!r} produced dim {extractor.dim}, registry says {info.dim}")
    return extractor


register_backbone(
    "vit-b16", 768,
    "base encoder, 16px patches, pretrained on the 21k-class corpus",
    _hub_factory("google/vit-base-patch16-224-in21k", 768),
)
register_backbone(
    "vit-b16-ft", 768,
    "base encoder, 16px patches, fine-tuned on the 1k-class labels",
    _hub_factory("google/vit-base-patch16-224", 768),
)
register_backbone(
    "vit-l14", 1024,
    "large contrastively trained vision tower, 14px patches",
    _hub_factory("openai/clip-vit-large-patch14", 1024, vision_tower=True),
)
