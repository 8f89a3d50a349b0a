"""Image-folder scanning with a stable, reproducible ordering.

A dataset is a directory of one sub-directory per class.  When the
directory has `train/` and `test/` children the split is a real
sub-tree; otherwise the same class folders serve both splits and the
split name only labels the output file.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ExportError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


@dataclass(frozen=True)
class ImageSet:
    """All images of one (dataset, split): parallel path and label lists."""

    dataset: Path
    split: str
    class_names: tuple[str, ...]
    paths: tuple[Path, ...]
    labels: tuple[int, ...]          # index into class_names


def _split_root(dataset: Path, split: str) -> Path:
    candidate = dataset / split
    return candidate if candidate.is_dir() else dataset


def discover_classes(dataset, split: str = "train") -> tuple[str, ...]:
    """Sorted names of the class folders that contain at least one image."""
    dataset = Path(dataset)
    if not dataset.is_dir():
        raise ExportError(f"dataset directory not found: {dataset}")
    root = _split_root(dataset, split)
    names = []
    for child in sorted(root.iterdir()):
        if child.is_dir() and any(p.suffix.lower() in IMAGE_SUFFIXES for p in child.iterdir()):
            names.append(child.name)
    if not names:
        raise ExportError(f"no class folders with images under {root}")
    return tuple(names)


def scan_images(dataset, split: str, classes: tuple[str, ...] | None = None) -> ImageSet:
    """Enumerate images class by class, file names sorted within each class."""
    dataset = Path(dataset)
    available = discover_classes(dataset, split)
    if classes is None:
        classes = available
    else:
        missing = sorted(set(classes) - set(available))
        if missing:
            raise ExportError(f"classes {missing} not found in {dataset} (split {split!r})")
        classes = tuple(classes)
    root = _split_root(dataset, split)
    paths: list[Path] = []
    labels: list[int] = []
    for idx, name in enumerate(classes):
        files = sorted(p for p in (root / name).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ExportError(f"class {name!r} has no images under {root}")
        paths.extend(files)
        labels.extend([idx] * len(files))
    return ImageSet(
        dataset=dataset,
        split=split,
        class_names=classes,
        paths=tuple(paths),
        labels=tuple(labels),
    )
