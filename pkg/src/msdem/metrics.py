"""Evaluation, forgetting curves, routing dependencies, PCA projection.

Evaluation is deterministic and chunked at a fixed size so repeated runs
of the same model on the same data produce bit-identical numbers. The
MSDEM_THREADS environment variable caps the worker pool used to spread
chunks across cores (results are reduced in chunk order, so the thread
count never changes the outcome).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .model import MsdemModel

EVAL_CHUNK = 256


def _worker_count() -> int:
    raw = os.environ.get("MSDEM_THREADS", "")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValidationError(f"MSDEM_THREADS must be an integer, got {raw!r}") from None
        return max(1, n)
    return min(4, os.cpu_count() or 1)


def evaluate_task(model: MsdemModel, task_id: int, test_x: np.ndarray, test_y: np.ndarray) -> float:
    """Fraction of test records whose prediction matches the label."""
    if test_x.shape[0] == 0:
        raise ValidationError(f"task {task_id} has an empty test set")
    allowed = set(model.task_specs[task_id].class_ids)
    bad = set(np.unique(test_y)) - allowed
    if bad:
        raise ValidationError(f"task {task_id}: test labels {sorted(bad)} not in the task's classes")
    chunks = [
        (test_x[i : i + EVAL_CHUNK], test_y[i : i + EVAL_CHUNK])
        for i in range(0, test_x.shape[0], EVAL_CHUNK)
    ]
    workers = _worker_count()
    if workers == 1 or len(chunks) == 1:
        hits = [int(np.sum(model.predict_batch(cx, task_id) == cy)) for cx, cy in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hits = list(pool.map(lambda c: int(np.sum(model.predict_batch(c[0], task_id) == c[1])), chunks))
    return float(sum(hits)) / float(test_x.shape[0])


@dataclass
class MetricsReport:
    """Accuracy matrix plus the headline continual-learning numbers.

    `accuracy[i][j]` is the accuracy on task j+1 measured after training
    task i+1 (lower-triangular, row i has i+1 entries).
    """

    accuracy: list[list[float]]
    wall_times_s: list[float] = field(default_factory=list)

    @property
    def n_tasks(self) -> int:
        return len(self.accuracy)

    @property
    def average(self) -> float:
        """Mean final-row accuracy: how the finished model does on every task."""
        return float(np.mean(self.accuracy[-1]))

    @property
    def last(self) -> float:
        """Final-task accuracy of the finished model."""
        return float(self.accuracy[-1][-1])

    @property
    def average_over_history(self) -> float:
        """Mean over the whole lower-triangular matrix (every eval ever made)."""
        return float(np.mean([a for row in self.accuracy for a in row]))

    def validate(self) -> None:
        for i, row in enumerate(self.accuracy):
            if len(row) != i + 1:
                raise ValidationError(f"accuracy row {i} has {len(row)} entries, expected {i + 1}")
            for a in row:
                if not 0.0 <= a <= 1.0:
                    raise ValidationError(f"accuracy {a} outside [0, 1]")


def report_from_rows(acc_rows: list[list[float]], wall_times_s: list[float] | None = None) -> MetricsReport:
    report = MetricsReport(accuracy=[list(r) for r in acc_rows], wall_times_s=list(wall_times_s or []))
    report.validate()
    return report


def forgetting_curves(report: MetricsReport) -> dict[int, list[float]]:
    """Task j -> accuracy trajectory [A(j,j), A(j+1,j), ..., A(N,j)]."""
    return {
        j: [report.accuracy[i][j - 1] for i in range(j - 1, report.n_tasks)]
        for j in range(1, report.n_tasks + 1)
    }


def router_dependency(model: MsdemModel) -> tuple[np.ndarray, np.ndarray]:
    """(raw, self_normalised) dependency matrices from deterministic routing.

    raw[i, j] is how much task i+1's router weights expert j+1 when routing
    without noise; rows sum to 1 over existing experts and are zero above
    the diagonal. The normalised form divides each row by its diagonal.
    """
    raw = model.relation.as_matrix(model.config.tau, model.config.clamp_lo)
    diag = np.diag(raw).copy()
    normalised = raw / diag[:, None]
    normalised[raw == 0.0] = 0.0
    return raw, normalised


# ---------------------------------------------------------------------------
# PCA via deflated power iteration


def pca_project(vectors: np.ndarray, k: int = 2, tol: float = 1e-8, max_iters: int = 1000) -> np.ndarray:
    """Project rows of `vectors` onto their top-k principal directions.

    Power iteration with deflation on the centred covariance; the start
    vector is a fixed seeded draw and each component's sign is pinned so
    the output is deterministic. Component signs make the largest-magnitude
    coordinate positive.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"pca_project expects [n, d], got {x.shape}")
    n, d = x.shape
    if n < 2:
        raise ValidationError("pca_project needs at least 2 rows")
    if not 1 <= k <= d:
        raise ValidationError(f"component count {k} outside [1, {d}]")
    centred = x - x.mean(axis=0)
    rng = np.random.Generator(np.random.PCG64(20240601))
    components: list[np.ndarray] = []
    lambdas: list[float] = []

    def matvec(v: np.ndarray) -> np.ndarray:
        out = centred.T @ (centred @ v) / (n - 1)
        for lam, c in zip(lambdas, components):
            out -= lam * c * (c @ v)
        return out

    for _ in range(k):
        v = rng.normal(size=d)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iters):
            w = matvec(v)
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break  # exhausted variance; keep current direction
            w /= norm
            if np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol:
                v, lam = w, norm
                break
            v, lam = w, norm
        pivot = int(np.argmax(np.abs(v)))
        if v[pivot] < 0:
            v = -v
        components.append(v)
        lambdas.append(lam)
    basis = np.stack(components, axis=1)
    return centred @ basis
