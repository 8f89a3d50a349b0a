"""Feature export jobs and stream assembly.

`export_features` runs one (backbone, dataset, split) job and writes one
feature file.  `make_manifest` stitches a set of finished jobs into a
stream manifest and validates the result by handing it to the training
engine's own loader.  `export_stream` is the convenience driver the CLI
uses: grid of jobs, shared label space, export, manifest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import msfv
from .backbones import FeatureExtractor, get_backbone, load_backbone
from .datasets import ImageSet, discover_classes, scan_images
from .errors import ExportError

SPLITS = ("train", "test")


@dataclass(frozen=True)
class ExportJob:
    """One feature file to produce."""

    backbone: str
    dataset: Path
    split: str
    out: Path
    classes: tuple[str, ...] | None = None   # None -> every class folder
    batch_size: int = 32
    device: str = "cpu"

    def __post_init__(self):
        object.__setattr__(self, "dataset", Path(self.dataset))
        object.__setattr__(self, "out", Path(self.out))
        if self.split not in SPLITS:
            raise ExportError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.batch_size < 1:
            raise ExportError(f"batch_size must be positive, got {self.batch_size}")


def _load_batch(paths: tuple[Path, ...]) -> list:
    images = []
    for p in paths:
        try:
            with Image.open(p) as img:
                images.append(img.convert("RGB"))
        except OSError as e:
            raise ExportError(f"could not read image {p}: {e}") from None
    return images


def extract_image_set(images: ImageSet, extractor: FeatureExtractor, batch_size: int) -> np.ndarray:
    feats = []
    for start in range(0, len(images.paths), batch_size):
        batch = _load_batch(images.paths[start:start + batch_size])
        out = np.asarray(extractor.extract(batch), dtype=np.float32)
        if out.shape != (len(batch), extractor.dim):
            raise ExportError(f"extractor returned shape {out.shape} for a batch of {len(batch)}")
        feats.append(out)
    return np.concatenate(feats, axis=0)


def export_features(job: ExportJob, extractor: FeatureExtractor | None = None,
                    label_offset: int = 0, label_cardinality: int | None = None,
                    force: bool = False) -> Path:
    """Run one job and return the path of its feature file.

    `label_offset` positions this dataset's classes inside the stream's
    global label space; standalone single-dataset exports can leave it
    at zero.  An existing output file is reused unless `force` is set:
    frozen weights and no augmentation make re-extraction a no-op.
    """
    if job.out.exists() and not force:
        return job.out
    images = scan_images(job.dataset, job.split, job.classes)
    if extractor is None:
        extractor = load_backbone(job.backbone, job.device)
    vectors = extract_image_set(images, extractor, job.batch_size)
    labels = np.asarray(images.labels, dtype=np.int64) + label_offset
    cardinality = label_cardinality
    if cardinality is None:
        cardinality = label_offset + len(images.class_names)
    job.out.parent.mkdir(parents=True, exist_ok=True)
    return msfv.write_feature_file(job.out, labels, vectors, cardinality)


# ---------------------------------------------------------------------------
# stream assembly


def _group_by_domain(jobs: list[ExportJob], domain_order: list[Path] | None):
    by_dataset: dict[Path, list[ExportJob]] = {}
    for job in jobs:
        by_dataset.setdefault(job.dataset, []).append(job)
    if domain_order is None:
        order = list(by_dataset)
    else:
        order = [Path(d) for d in domain_order]
        if set(order) != set(by_dataset):
            raise ExportError(
                f"domain order {sorted(map(str, order))} does not match "
                f"job datasets {sorted(map(str, by_dataset))}"
            )
    return order, by_dataset


def _domain_classes(dataset: Path, jobs: list[ExportJob]) -> tuple[str, ...]:
    """The one class tuple all jobs of a domain agree on."""
    resolved = set()
    for job in jobs:
        classes = job.classes or discover_classes(dataset, job.split)
        resolved.add(tuple(classes))
    if len(resolved) != 1:
        raise ExportError(f"jobs for {dataset} disagree on the class subset: {sorted(resolved)}")
    return resolved.pop()


def _chunk_tasks(class_ids: list[int], classes_per_task: int | None) -> list[list[int]]:
    if classes_per_task is None:
        return [class_ids]
    if classes_per_task < 1:
        raise ExportError(f"classes_per_task must be positive, got {classes_per_task}")
    if len(class_ids) % classes_per_task:
        raise ExportError(
            f"{len(class_ids)} classes do not divide into tasks of {classes_per_task}"
        )
    return [class_ids[i:i + classes_per_task] for i in range(0, len(class_ids), classes_per_task)]


def _validate_stream(manifest_path: Path) -> None:
    from msdem.stream import build_stream

    try:
        build_stream(manifest_path)
    except Exception as e:
        raise ExportError(f"exported stream failed msdem validation: {e}") from None


def make_manifest(jobs: list[ExportJob], out_path,
                  domain_order: list[Path] | None = None,
                  classes_per_task: int | None = None,
                  validate: bool = True) -> Path:
    """Write a stream manifest covering `jobs` and validate it end to end.

    Every dataset becomes one domain (in `domain_order`, default job
    order); every domain needs a train and a test job for every backbone
    in play, with the feature files already on disk.
    """
    if not jobs:
        raise ExportError("no export jobs given")
    out_path = Path(out_path)
    order, by_dataset = _group_by_domain(jobs, domain_order)
    backbone_names = sorted({job.backbone for job in jobs})

    domains_doc = []
    tasks_doc = []
    offset = 0
    for domain_id, dataset in enumerate(order):
        domain_jobs = by_dataset[dataset]
        classes = _domain_classes(dataset, domain_jobs)
        files: dict[str, dict[str, str]] = {name: {} for name in backbone_names}
        for job in domain_jobs:
            if not job.out.is_file():
                raise ExportError(f"feature file missing for {job.backbone}/{job.split}: {job.out}")
            files[job.backbone][job.split] = os.path.relpath(job.out.resolve(), out_path.parent.resolve())
        missing = [f"{name}/{split}" for name in backbone_names for split in SPLITS
                   if split not in files[name]]
        if missing:
            raise ExportError(f"domain {dataset} is missing jobs for: {', '.join(missing)}")
        domains_doc.append({"domain_id": domain_id, "files": files})

        class_ids = list(range(offset, offset + len(classes)))
        for chunk in _chunk_tasks(class_ids, classes_per_task):
            tasks_doc.append({"task_id": len(tasks_doc) + 1, "domain_id": domain_id, "class_ids": chunk})
        offset += len(classes)

    doc = {
        "version": 1,
        "backbones": [{"name": name, "dim": get_backbone(name).dim} for name in backbone_names],
        "label_cardinality": offset,
        "domains": domains_doc,
        "tasks": tasks_doc,
    }
    out_path.write_text(yaml.safe_dump(doc, sort_keys=False))
    if validate:
        _validate_stream(out_path)
    return out_path


def export_stream(backbones: list[str], datasets: list[Path], out_dir,
                  classes: dict[Path, tuple[str, ...] | None] | None = None,
                  classes_per_task: int | None = None,
                  batch_size: int = 32, device: str = "cpu",
                  force: bool = False) -> Path:
    """Export the full (backbone x dataset x split) grid plus manifest."""
    if not backbones or not datasets:
        raise ExportError("need at least one backbone and one dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    classes = classes or {}

    # Pin down the shared label space first so every file agrees on it.
    domain_classes = {}
    offset_for = {}
    offset = 0
    for dataset in datasets:
        chosen = classes.get(dataset) or discover_classes(dataset, "train")
        domain_classes[dataset] = tuple(chosen)
        offset_for[dataset] = offset
        offset += len(chosen)
    cardinality = offset

    jobs = []
    extractors: dict[str, FeatureExtractor] = {}
    for name in backbones:
        for d, dataset in enumerate(datasets):
            for split in SPLITS:
                job = ExportJob(
                    backbone=name, dataset=dataset, split=split,
                    out=out_dir / f"d{d}_{name}_{split}.msfv",
                    classes=domain_classes[dataset],
                    batch_size=batch_size, device=device,
                )
                if force or not job.out.exists():
                    if name not in extractors:
                        extractors[name] = load_backbone(name, device)
                    export_features(job, extractors[name],
                                    label_offset=offset_for[dataset],
                                    label_cardinality=cardinality, force=force)
                jobs.append(job)
    return make_manifest(jobs, out_dir / "manifest.yaml",
                         domain_order=list(datasets), classes_per_task=classes_per_task)
