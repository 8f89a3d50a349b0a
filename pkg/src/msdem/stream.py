"""Feature files, synthetic data, manifests, and the task stream.

The on-disk feature format is a little-endian binary: a 21-byte header
(magic ``MSFV``, u8 version, u32 feature dim, u64 record count, u32 label
cardinality) followed by packed records of u32 label + dim float32 values.
A YAML manifest ties per-(domain, backbone, split) files into an ordered
list of tasks; :func:`build_stream` validates the lot and produces a
:class:`TaskStream` whose training data is gated to one task at a time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import yaml

from . import seeding
from .errors import FeatureFileError, ManifestError, ValidationError

MAGIC = b"MSFV"
FORMAT_VERSION = 1
HEADER_SIZE = 21
_HEADER = struct.Struct("<4sBIQI")

# Above this payload size the reader parses in bounded chunks instead of
# slurping the file in one read.
DEFAULT_MEMORY_BUDGET = 256 * 1024 * 1024
_CHUNK_RECORDS = 4096


@dataclass(frozen=True)
class BackboneSpec:
    """A feature source: just a name and its output dimension."""

    name: str
    dim: int


@dataclass(frozen=True)
class TaskSpec:
    task_id: int          # 1-based position in the stream
    domain_id: int
    class_ids: tuple[int, ...] = ()   # global label ids, disjoint across tasks

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)


@dataclass(frozen=True)
class FeatureRecord:
    """One example: a feature vector per backbone plus its global label."""

    per_backbone: tuple[np.ndarray, ...]
    label: int
    domain_id: int


@dataclass(frozen=True)
class FeatureFileHeader:
    version: int
    dim: int
    n_records: int
    label_cardinality: int


def fuse_features(record: FeatureRecord, backbones: list[BackboneSpec]) -> np.ndarray:
    """Concatenate the per-backbone vectors in backbone order."""
    if len(record.per_backbone) != len(backbones):
        raise ValidationError(
            f"record has {len(record.per_backbone)} feature vectors for {len(backbones)} backbones"
        )
    for vec, bb in zip(record.per_backbone, backbones):
        if vec.shape != (bb.dim,):
            raise ValidationError(f"backbone {bb.name!r}: vector shape {vec.shape} != ({bb.dim},)")
    return np.concatenate(record.per_backbone)


# ---------------------------------------------------------------------------
# binary feature files


def write_feature_file(path, labels: np.ndarray, vectors: np.ndarray, label_cardinality: int) -> None:
    """Write labels [n] and vectors [n, dim] to `path` in the packed format."""
    labels = np.asarray(labels)
    vectors = np.asarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or labels.shape != (vectors.shape[0],):
        raise ValidationError(f"labels {labels.shape} / vectors {vectors.shape} are inconsistent")
    if labels.size and (labels.min() < 0 or labels.max() >= label_cardinality):
        raise ValidationError(f"labels must lie in [0, {label_cardinality}), got range "
                              f"[{labels.min()}, {labels.max()}]")
    if not np.all(np.isfinite(vectors)):
        raise ValidationError("vectors contain non-finite values")
    n, dim = vectors.shape
    rec_size = 4 + 4 * dim
    body = np.empty((n, rec_size), dtype=np.uint8)
    body[:, :4] = labels.astype("<u4").view(np.uint8).reshape(n, 4)
    body[:, 4:] = np.ascontiguousarray(vectors).view(np.uint8).reshape(n, 4 * dim)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, dim, n, label_cardinality))
        f.write(body.tobytes())


def read_feature_header(path) -> FeatureFileHeader:
    with open(path, "rb") as f:
        raw = f.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise FeatureFileError(f"truncated header in {path}", offset=len(raw))
    magic, version, dim, n, cardinality = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FeatureFileError(f"bad magic {magic!r} in {path}", offset=0)
    if version != FORMAT_VERSION:
        raise FeatureFileError(f"unsupported format version {version} in {path}", offset=4)
    if dim == 0:
        raise FeatureFileError(f"feature dim must be positive in {path}", offset=5)
    return FeatureFileHeader(version, dim, n, cardinality)


def _parse_records(buf: bytes, header: FeatureFileHeader, base_offset: int, path) -> tuple[np.ndarray, np.ndarray]:
    dim = header.dim
    rec_size = 4 + 4 * dim
    n = len(buf) // rec_size
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(n, rec_size)
    labels = raw[:, :4].copy().view("<u4").ravel().astype(np.int64)
    vectors = raw[:, 4:].copy().view("<f4").reshape(n, dim)
    bad = np.nonzero(labels >= header.label_cardinality)[0]
    if bad.size:
        i = int(bad[0])
        raise FeatureFileError(
            f"label {labels[i]} out of range [0, {header.label_cardinality}) in {path}",
            offset=base_offset + i * rec_size,
        )
    finite = np.isfinite(vectors)
    if not finite.all():
        i, j = np.argwhere(~finite)[0]
        raise FeatureFileError(
            f"non-finite feature value in {path}",
            offset=base_offset + int(i) * rec_size + 4 + 4 * int(j),
        )
    return labels, vectors


def load_feature_file(path, memory_budget_bytes: int = DEFAULT_MEMORY_BUDGET):
    """Read a feature file fully: returns (header, labels [n], vectors [n, dim]).

    Files whose payload exceeds `memory_budget_bytes` are parsed in bounded
    chunks rather than one monolithic read; the result is identical.
    """
    header = read_feature_header(path)
    rec_size = 4 + 4 * header.dim
    expected = header.n_records * rec_size
    actual = Path(path).stat().st_size - HEADER_SIZE
    if actual < expected:
        raise FeatureFileError(
            f"truncated payload in {path}: have {actual} bytes, header declares {expected}",
            offset=HEADER_SIZE + actual,
        )
    if actual > expected:
        raise FeatureFileError(f"trailing bytes after last record in {path}", offset=HEADER_SIZE + expected)

    if expected <= memory_budget_bytes:
        with open(path, "rb") as f:
            f.seek(HEADER_SIZE)
            return (header, *_parse_records(f.read(expected), header, HEADER_SIZE, path))

    labels = np.empty(header.n_records, dtype=np.int64)
    vectors = np.empty((header.n_records, header.dim), dtype=np.float32)
    done = 0
    with open(path, "rb") as f:
        f.seek(HEADER_SIZE)
        while done < header.n_records:
            take = min(_CHUNK_RECORDS, header.n_records - done)
            buf = f.read(take * rec_size)
            ls, vs = _parse_records(buf, header, HEADER_SIZE + done * rec_size, path)
            labels[done : done + take] = ls
            vectors[done : done + take] = vs
            done += take
    return header, labels, vectors


def iter_feature_records(path, chunk_records: int = _CHUNK_RECORDS) -> Iterator[tuple[int, np.ndarray]]:
    """Stream (label, vector) pairs without materialising the whole file."""
    header = read_feature_header(path)
    rec_size = 4 + 4 * header.dim
    done = 0
    with open(path, "rb") as f:
        f.seek(HEADER_SIZE)
        while done < header.n_records:
            take = min(chunk_records, header.n_records - done)
            buf = f.read(take * rec_size)
            if len(buf) < take * rec_size:
                raise FeatureFileError(
                    f"truncated payload in {path}",
                    offset=HEADER_SIZE + done * rec_size + len(buf),
                )
            labels, vectors = _parse_records(buf, header, HEADER_SIZE + done * rec_size, path)
            for i in range(take):
                yield int(labels[i]), vectors[i]
            done += take


# ---------------------------------------------------------------------------
# synthetic domains


@dataclass
class SynthDomain:
    """Per-backbone train/test arrays for one synthetic domain.

    Labels are local (0..n_classes-1); the caller maps them to global ids.
    """

    train_vectors: list[np.ndarray]
    test_vectors: list[np.ndarray]
    train_labels: np.ndarray
    test_labels: np.ndarray
    class_means: list[np.ndarray]


def synth_domain(
    seed: int,
    n_classes: int,
    samples_per_class: int,
    backbone_dims: list[int],
    separation: float,
    noise: float,
    base_means: list[np.ndarray] | None = None,
    perturb_scale: float = 0.0,
    train_fraction: float = 0.8,
) -> SynthDomain:
    """Draw a Gaussian-blob domain, one feature space per backbone.

    Class means come from N(0, separation^2 I) per backbone, samples from
    N(mean, noise^2 I), split train/test per class. When `base_means` is
    given the means are those plus N(0, perturb_scale^2 I) jitter, which
    produces a controllably similar sibling domain.
    """
    if n_classes < 2:
        raise ValidationError(f"need at least 2 classes, got {n_classes}")
    if samples_per_class < 2:
        raise ValidationError(f"need at least 2 samples per class, got {samples_per_class}")
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = seeding.derive_rng(seed, seeding.SYNTH)
    n_train = int(train_fraction * samples_per_class)
    if n_train == 0 or n_train == samples_per_class:
        raise ValidationError("train/test split leaves an empty side")

    means = []
    for j, dim in enumerate(backbone_dims):
        if base_means is not None:
            means.append(base_means[j] + perturb_scale * rng.normal(size=(n_classes, dim)))
        else:
            means.append(rng.normal(scale=separation, size=(n_classes, dim)))

    train_vectors, test_vectors = [], []
    for j, dim in enumerate(backbone_dims):
        tr = np.empty((n_classes * n_train, dim), dtype=np.float32)
        te = np.empty((n_classes * (samples_per_class - n_train), dim), dtype=np.float32)
        n_test = samples_per_class - n_train
        for c in range(n_classes):
            pts = means[j][c] + rng.normal(scale=noise, size=(samples_per_class, dim))
            tr[c * n_train : (c + 1) * n_train] = pts[:n_train]
            te[c * n_test : (c + 1) * n_test] = pts[n_train:]
        train_vectors.append(tr)
        test_vectors.append(te)

    train_labels = np.repeat(np.arange(n_classes, dtype=np.int64), n_train)
    test_labels = np.repeat(np.arange(n_classes, dtype=np.int64), samples_per_class - n_train)
    return SynthDomain(train_vectors, test_vectors, train_labels, test_labels, means)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class Manifest:
    backbones: list[BackboneSpec]
    label_cardinality: int
    domain_files: dict[int, dict[str, dict[str, str]]]  # domain -> backbone name -> split -> path
    tasks: list[TaskSpec]
    base_dir: Path
    seed: int | None = None


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ManifestError(f"manifest is not valid YAML: {e}") from None
    if not isinstance(doc, dict):
        raise ManifestError("manifest root must be a mapping")
    problems: list[str] = []

    backbones = []
    for i, bb in enumerate(doc.get("backbones") or []):
        name, dim = bb.get("name"), bb.get("dim")
        if not isinstance(name, str) or not name:
            problems.append(f"backbones[{i}]: missing name")
        if not isinstance(dim, int) or dim <= 0:
            problems.append(f"backbones[{i}]: dim must be a positive integer")
        else:
            backbones.append(BackboneSpec(name=name, dim=dim))
    if not backbones:
        problems.append("at least one backbone is required")

    cardinality = doc.get("label_cardinality")
    if not isinstance(cardinality, int) or cardinality < 2:
        problems.append("label_cardinality must be an integer >= 2")
        cardinality = 0

    bb_names = {bb.name for bb in backbones}
    domain_files: dict[int, dict[str, dict[str, str]]] = {}
    for i, dom in enumerate(doc.get("domains") or []):
        did = dom.get("domain_id")
        if not isinstance(did, int) or did < 0:
            problems.append(f"domains[{i}]: domain_id must be a non-negative integer")
            continue
        files = dom.get("files") or {}
        missing = bb_names - set(files)
        if missing:
            problems.append(f"domain {did}: no files for backbones {sorted(missing)}")
        for bb_name, splits in files.items():
            for split in ("train", "test"):
                if split not in (splits or {}):
                    problems.append(f"domain {did}, backbone {bb_name}: missing {split} file")
        domain_files[did] = files

    tasks = []
    seen_classes: set[int] = set()
    for i, t in enumerate(doc.get("tasks") or []):
        tid, did, cids = t.get("task_id"), t.get("domain_id"), t.get("class_ids")
        if tid != i + 1:
            problems.append(f"tasks[{i}]: task_id must be {i + 1}, got {tid}")
            continue
        if did not in domain_files:
            problems.append(f"task {tid}: unknown domain_id {did}")
            continue
        if not cids:
            problems.append(f"task {tid}: class_ids is empty")
            continue
        overlap = seen_classes & set(cids)
        if overlap:
            problems.append(f"task {tid}: class_ids {sorted(overlap)} already used by an earlier task")
        if cardinality and (min(cids) < 0 or max(cids) >= cardinality):
            problems.append(f"task {tid}: class_ids outside [0, {cardinality})")
        seen_classes.update(cids)
        tasks.append(TaskSpec(task_id=tid, domain_id=did, class_ids=tuple(cids)))
    if not tasks:
        problems.append("at least one task is required")

    if problems:
        raise ManifestError("invalid manifest:\n  " + "\n  ".join(problems))
    return Manifest(
        backbones=backbones,
        label_cardinality=cardinality,
        domain_files=domain_files,
        tasks=tasks,
        base_dir=path.parent,
        seed=doc.get("seed"),
    )


def write_manifest(path, manifest_doc: dict) -> None:
    Path(path).write_text(yaml.safe_dump(manifest_doc, sort_keys=False))


# ---------------------------------------------------------------------------
# task stream


@dataclass
class TaskData:
    spec: TaskSpec
    train_x: np.ndarray   # [n, d_fused] float32, backbone blocks concatenated
    train_y: np.ndarray   # [n] global labels
    test_x: np.ndarray
    test_y: np.ndarray


class TaskStream:
    """Ordered tasks with one-task-at-a-time training access.

    Training data is only readable for the task currently at the cursor;
    test data is readable for any task at or before the cursor. This keeps
    the continual-learning contract (no peeking at future or past training
    sets) enforced by construction rather than by convention.
    """

    def __init__(self, backbones: list[BackboneSpec], label_cardinality: int, tasks: list[TaskData]):
        if not tasks:
            raise ValidationError("a task stream needs at least one task")
        got = [t.spec.task_id for t in tasks]
        if got != list(range(1, len(tasks) + 1)):
            raise ValidationError(f"task ids must be 1..{len(tasks)} in order, got {got}")
        self.backbones = list(backbones)
        self.label_cardinality = label_cardinality
        self._tasks = {t.spec.task_id: t for t in tasks}
        self._cursor = 1

    @property
    def n_tasks(self) -> int:
        return len(self._tasks)

    @property
    def cursor(self) -> int:
        return self._cursor

    @property
    def backbone_dims(self) -> list[int]:
        return [bb.dim for bb in self.backbones]

    def spec(self, task_id: int) -> TaskSpec:
        return self._tasks[task_id].spec

    def task_specs(self) -> list[TaskSpec]:
        return [self._tasks[i].spec for i in range(1, self.n_tasks + 1)]

    def train_data(self, task_id: int) -> tuple[np.ndarray, np.ndarray]:
        if task_id != self._cursor:
            raise ValidationError(
                f"training data for task {task_id} is inaccessible while the stream cursor is at task {self._cursor}"
            )
        t = self._tasks[task_id]
        return t.train_x, t.train_y

    def test_data(self, task_id: int) -> tuple[np.ndarray, np.ndarray]:
        if task_id > self._cursor:
            raise ValidationError(f"test data for future task {task_id} is inaccessible at cursor {self._cursor}")
        t = self._tasks[task_id]
        return t.test_x, t.test_y

    def advance(self) -> None:
        if self._cursor <= self.n_tasks:
            self._cursor += 1


def _fuse_domain(per_backbone: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(per_backbone, axis=1)


def build_stream(manifest: Manifest | str | Path, memory_budget_bytes: int = DEFAULT_MEMORY_BUDGET) -> TaskStream:
    """Load every referenced feature file, validate, and assemble tasks.

    Cross-backbone alignment is checked explicitly: within a domain and
    split, every backbone file must list the same labels in the same order.
    """
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    problems: list[str] = []
    # domain -> split -> (fused [n, d], labels [n])
    loaded: dict[int, dict[str, tuple[np.ndarray, np.ndarray]]] = {}
    for did, files in manifest.domain_files.items():
        loaded[did] = {}
        for split in ("train", "test"):
            per_bb, ref_labels = [], None
            for bb in manifest.backbones:
                rel = files[bb.name][split]
                fpath = manifest.base_dir / rel
                if not fpath.exists():
                    problems.append(f"domain {did}: missing file {rel}")
                    continue
                header, labels, vectors = load_feature_file(fpath, memory_budget_bytes)
                if header.dim != bb.dim:
                    problems.append(f"{rel}: feature dim {header.dim} != backbone {bb.name!r} dim {bb.dim}")
                    continue
                if header.label_cardinality != manifest.label_cardinality:
                    problems.append(
                        f"{rel}: label cardinality {header.label_cardinality} != manifest {manifest.label_cardinality}"
                    )
                    continue
                if ref_labels is None:
                    ref_labels = labels
                elif not np.array_equal(ref_labels, labels):
                    problems.append(f"{rel}: label order disagrees with the first backbone for domain {did} {split}")
                    continue
                per_bb.append(vectors)
            if len(per_bb) == len(manifest.backbones) and ref_labels is not None:
                loaded[did][split] = (_fuse_domain(per_bb), ref_labels)
    if problems:
        raise ManifestError("cannot build stream:\n  " + "\n  ".join(problems))

    tasks: list[TaskData] = []
    for spec in manifest.tasks:
        train_x, train_y = loaded[spec.domain_id]["train"]
        test_x, test_y = loaded[spec.domain_id]["test"]
        tr_mask = np.isin(train_y, spec.class_ids)
        te_mask = np.isin(test_y, spec.class_ids)
        for cid in spec.class_ids:
            if not np.any(train_y[tr_mask] == cid):
                problems.append(f"task {spec.task_id}: class {cid} has no training records")
            if not np.any(test_y[te_mask] == cid):
                problems.append(f"task {spec.task_id}: class {cid} has no test records")
        tasks.append(
            TaskData(
                spec=spec,
                train_x=train_x[tr_mask],
                train_y=train_y[tr_mask],
                test_x=test_x[te_mask],
                test_y=test_y[te_mask],
            )
        )
    if problems:
        raise ManifestError("cannot build stream:\n  " + "\n  ".join(problems))
    return TaskStream(manifest.backbones, manifest.label_cardinality, tasks)


def record_from_row(row: np.ndarray, backbones: list[BackboneSpec], label: int, domain_id: int) -> FeatureRecord:
    """Split a fused row back into per-backbone vectors."""
    dims = [bb.dim for bb in backbones]
    if row.shape != (sum(dims),):
        raise ValidationError(f"fused row has shape {row.shape}, backbones sum to {sum(dims)}")
    parts = np.split(row, np.cumsum(dims)[:-1])
    return FeatureRecord(per_backbone=tuple(parts), label=label, domain_id=domain_id)


# ---------------------------------------------------------------------------
# synthetic dataset generation (files + manifest)


@dataclass
class SynthStreamConfig:
    """Knobs for a full synthetic multi-domain stream."""

    seed: int = 123
    backbones: list[BackboneSpec] = field(
        default_factory=lambda: [BackboneSpec("bb0", 64), BackboneSpec("bb1", 64)]
    )
    n_domains: int = 4
    tasks_per_domain: int = 3
    classes_per_task: int = 20
    samples_per_class: int = 125
    separation: float = 5.0
    noise: float = 0.5
    task_order: str = "by_domain"  # or "round_robin"
    # domain_id -> (base_domain_id, perturb_scale): generate this domain as a
    # jittered copy of an earlier one instead of drawing fresh means.
    domain_clones: dict[int, tuple[int, float]] = field(default_factory=dict)

    @property
    def classes_per_domain(self) -> int:
        return self.tasks_per_domain * self.classes_per_task

    @property
    def label_cardinality(self) -> int:
        return self.n_domains * self.classes_per_domain


def synth_config_to_dict(cfg: SynthStreamConfig) -> dict:
    doc = {
        "seed": cfg.seed,
        "backbones": [{"name": bb.name, "dim": bb.dim} for bb in cfg.backbones],
        "n_domains": cfg.n_domains,
        "tasks_per_domain": cfg.tasks_per_domain,
        "classes_per_task": cfg.classes_per_task,
        "samples_per_class": cfg.samples_per_class,
        "separation": cfg.separation,
        "noise": cfg.noise,
        "task_order": cfg.task_order,
    }
    if cfg.domain_clones:
        doc["domain_clones"] = [
            {"domain_id": d, "base_domain": b, "perturb_scale": s}
            for d, (b, s) in sorted(cfg.domain_clones.items())
        ]
    return doc


def synth_config_from_dict(doc: dict) -> SynthStreamConfig:
    from .errors import ConfigError

    cfg = SynthStreamConfig()
    problems: list[str] = []
    known = {
        "seed", "backbones", "n_domains", "tasks_per_domain", "classes_per_task",
        "samples_per_class", "separation", "noise", "task_order", "domain_clones",
    }
    for key in doc:
        if key not in known:
            problems.append(f"unknown key {key!r}")
    if "backbones" in doc:
        bbs = []
        for i, bb in enumerate(doc["backbones"] or []):
            if not isinstance(bb, dict) or not isinstance(bb.get("name"), str) or not isinstance(bb.get("dim"), int) or bb["dim"] <= 0:
                problems.append(f"backbones[{i}]: need name (string) and dim (positive integer)")
            else:
                bbs.append(BackboneSpec(bb["name"], bb["dim"]))
        if bbs:
            cfg.backbones = bbs
        else:
            problems.append("backbones must be a non-empty list")
    for key, lo in (("seed", 0), ("n_domains", 1), ("tasks_per_domain", 1), ("classes_per_task", 2), ("samples_per_class", 2)):
        if key in doc:
            v = doc[key]
            if not isinstance(v, int) or v < lo:
                problems.append(f"{key} must be an integer >= {lo}, got {v!r}")
            else:
                setattr(cfg, key, v)
    for key in ("separation", "noise"):
        if key in doc:
            v = doc[key]
            if not isinstance(v, (int, float)) or v <= 0:
                problems.append(f"{key} must be a positive number, got {v!r}")
            else:
                setattr(cfg, key, float(v))
    if "task_order" in doc:
        if doc["task_order"] not in ("by_domain", "round_robin"):
            problems.append(f"task_order must be 'by_domain' or 'round_robin', got {doc['task_order']!r}")
        else:
            cfg.task_order = doc["task_order"]
    if "domain_clones" in doc:
        clones: dict[int, tuple[int, float]] = {}
        for i, c in enumerate(doc["domain_clones"] or []):
            if not isinstance(c, dict) or not all(k in c for k in ("domain_id", "base_domain", "perturb_scale")):
                problems.append(f"domain_clones[{i}]: need domain_id, base_domain, perturb_scale")
                continue
            if not isinstance(c["domain_id"], int) or not isinstance(c["base_domain"], int):
                problems.append(f"domain_clones[{i}]: domain ids must be integers")
                continue
            if c["base_domain"] >= c["domain_id"]:
                problems.append(f"domain_clones[{i}]: base_domain must precede domain_id")
                continue
            clones[c["domain_id"]] = (c["base_domain"], float(c["perturb_scale"]))
        cfg.domain_clones = clones
    if problems:
        raise ConfigError("invalid synthetic-stream config:\n  " + "\n  ".join(problems))
    return cfg


def generate_synthetic_dataset(cfg: SynthStreamConfig, out_dir) -> Path:
    """Write feature files plus manifest.yaml for `cfg`; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cpd = cfg.classes_per_domain
    dims = [bb.dim for bb in cfg.backbones]

    domains_doc = []
    means_by_domain: dict[int, list[np.ndarray]] = {}
    for d in range(cfg.n_domains):
        kwargs = {}
        if d in cfg.domain_clones:
            base, scale = cfg.domain_clones[d]
            kwargs = {"base_means": means_by_domain[base], "perturb_scale": scale}
        dom = synth_domain(
            seed=seeding.derive_seed(cfg.seed, seeding.SYNTH, d),
            n_classes=cpd,
            samples_per_class=cfg.samples_per_class,
            backbone_dims=dims,
            separation=cfg.separation,
            noise=cfg.noise,
            **kwargs,
        )
        means_by_domain[d] = dom.class_means
        files: dict[str, dict[str, str]] = {}
        for j, bb in enumerate(cfg.backbones):
            files[bb.name] = {}
            for split, vectors, labels in (
                ("train", dom.train_vectors[j], dom.train_labels),
                ("test", dom.test_vectors[j], dom.test_labels),
            ):
                fname = f"d{d}_{bb.name}_{split}.msfv"
                write_feature_file(out_dir / fname, labels + d * cpd, vectors, cfg.label_cardinality)
                files[bb.name][split] = fname
        domains_doc.append({"domain_id": d, "files": files})

    def task_classes(d: int, k: int) -> list[int]:
        start = d * cpd + k * cfg.classes_per_task
        return list(range(start, start + cfg.classes_per_task))

    pairs = []
    if cfg.task_order == "by_domain":
        pairs = [(d, k) for d in range(cfg.n_domains) for k in range(cfg.tasks_per_domain)]
    else:
        pairs = [(d, k) for k in range(cfg.tasks_per_domain) for d in range(cfg.n_domains)]
    tasks_doc = [
        {"task_id": i + 1, "domain_id": d, "class_ids": task_classes(d, k)}
        for i, (d, k) in enumerate(pairs)
    ]

    manifest_doc = {
        "version": 1,
        "seed": cfg.seed,
        "backbones": [{"name": bb.name, "dim": bb.dim} for bb in cfg.backbones],
        "label_cardinality": cfg.label_cardinality,
        "domains": domains_doc,
        "tasks": tasks_doc,
    }
    manifest_path = out_dir / "manifest.yaml"
    write_manifest(manifest_path, manifest_doc)
    return manifest_path
