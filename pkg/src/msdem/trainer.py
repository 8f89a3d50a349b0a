"""Sequential training over a task stream.

Each task gets three Adam groups: the expert's adapter/classifier, the
task's relevance row, and the two attention stages. Before every
optimizer step the trainable-parameter set is audited against those
groups and every frozen parameter is byte-checked, so a freezing bug
fails loudly at the step that caused it rather than showing up later as
quiet forgetting.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from . import tensor as T
from .errors import ConfigError, ValidationError
from .model import MsdemModel
from .optim import Adam
from .stream import TaskSpec, TaskStream


@dataclass
class TrainConfig:
    epochs_per_task: int = 1
    batch_size: int = 64
    lr_expert: float = 1e-3
    lr_router: float = 1e-2
    lr_attention: float = 1e-3
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.epochs_per_task < 1:
            problems.append(f"epochs_per_task must be >= 1, got {self.epochs_per_task}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("lr_expert", "lr_router", "lr_attention"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                problems.append(f"{name} must be positive and finite, got {v}")
        if self.seed < 0:
            problems.append(f"seed must be non-negative, got {self.seed}")
        if problems:
            raise ConfigError("invalid training config:\n  " + "\n  ".join(problems))


@dataclass
class TrainLog:
    task_id: int
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    steps_per_epoch: int = 0
    epochs: int = 0
    wall_time_s: float = 0.0
    # final optimizer groups, kept so a checkpoint written after the task
    # can include their moment estimates; not part of the delimited log
    optimizers: dict | None = None


def write_train_log(log: TrainLog, path) -> None:
    """Delimited numeric table: step, epoch, loss, grad_norm."""
    lines = [f"# task={log.task_id} wall_time_s={log.wall_time_s:.3f}", "step,epoch,loss,grad_norm"]
    for i, (loss, gn) in enumerate(zip(log.losses, log.grad_norms)):
        epoch = i // log.steps_per_epoch if log.steps_per_epoch else 0
        lines.append(f"{i},{epoch},{loss!r},{gn!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _one_hot(y_local: np.ndarray, k: int, dtype) -> np.ndarray:
    out = np.zeros((y_local.shape[0], k), dtype=dtype)
    out[np.arange(y_local.shape[0]), y_local] = 1.0
    return out


def train_task(
    model: MsdemModel,
    task: TaskSpec,
    train_x: np.ndarray,
    train_y: np.ndarray,
    config: TrainConfig,
) -> TrainLog:
    """Open `task` on the model and fit its column on (train_x, train_y)."""
    config.validate()
    if train_x.shape[0] == 0:
        raise ValidationError(f"task {task.task_id} has no training records")
    unknown = set(np.unique(train_y)) - set(task.class_ids)
    if unknown:
        raise ValidationError(f"task {task.task_id}: labels {sorted(unknown)} not in the task's classes")

    model.begin_task(task)
    t = task.task_id
    groups = model.parameter_groups(t)
    expected_names = {p.name for ps in groups.values() for p in ps}
    if len(expected_names) != sum(len(ps) for ps in groups.values()):
        raise ValidationError("optimizer groups overlap")
    optimizers = [
        Adam(groups["expert"], config.lr_expert),
        Adam(groups["router"], config.lr_router),
        Adam(groups["attention"], config.lr_attention),
    ]

    local_index = {c: i for i, c in enumerate(task.class_ids)}
    y_local = np.array([local_index[c] for c in train_y], dtype=np.int64)
    n = train_x.shape[0]
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    log = TrainLog(task_id=t, steps_per_epoch=steps_per_epoch, epochs=config.epochs_per_task)
    shuffle_rng = seeding.derive_rng(config.seed, seeding.SHUFFLE, t)

    started = time.perf_counter()
    for epoch in range(config.epochs_per_task):
        perm = shuffle_rng.permutation(n)
        for step in range(steps_per_epoch):
            idx = perm[step * config.batch_size : (step + 1) * config.batch_size]
            xb = train_x[idx]
            yb = _one_hot(y_local[idx], task.n_classes, model.config.np_dtype)
            noise_seed = seeding.derive_seed(config.seed, seeding.NOISE, t, epoch, step)

            for opt in optimizers:
                opt.clear_grads()
            logits, _ = model.forward_batch(xb, t, mode="train", seed=noise_seed)
            loss = T.cross_entropy_mean(logits, yb)
            T.backward(loss)

            # audit, then step
            trainable_now = {p.name for p in model.trainable_parameters()}
            if trainable_now != expected_names:
                raise ValidationError(
                    f"trainable set changed mid-task: {sorted(trainable_now ^ expected_names)}"
                )
            model.audit_frozen()
            sq = 0.0
            for ps in groups.values():
                for p in ps:
                    if p.grad is not None:
                        sq += float(np.sum(p.grad.astype(np.float64) ** 2))
            for opt in optimizers:
                opt.step()

            log.losses.append(float(loss.data))
            log.grad_norms.append(float(np.sqrt(sq)))
    log.wall_time_s = time.perf_counter() - started
    log.optimizers = {"expert": optimizers[0], "router": optimizers[1], "attention": optimizers[2]}
    return log


def train_stream(
    model: MsdemModel,
    stream: TaskStream,
    config: TrainConfig,
    after_task=None,
    stop_after: int | None = None,
):
    """Train every remaining task in order, evaluating after each.

    Resumes cleanly: tasks at or below model.current_task are treated as
    done and skipped past. `after_task(model, task_id, logs, acc_rows)` runs
    once per trained task; `stop_after` ends the run early after that many
    newly trained tasks (both are how the CLI wires checkpoints in).
    Returns (logs, accuracy_rows) where accuracy_rows[i] holds the
    accuracies on tasks 1..i+1 measured after training task i+1.
    """
    from .metrics import evaluate_task  # local import to avoid a cycle

    config.validate()
    if stream.n_tasks == 0:
        raise ValidationError("empty task stream")
    if model.current_task > stream.n_tasks:
        raise ValidationError(
            f"model already has {model.current_task} tasks, stream only {stream.n_tasks}"
        )
    while stream.cursor <= model.current_task:
        stream.advance()

    logs: list[TrainLog] = []
    acc_rows: list[list[float]] = []
    trained = 0
    for t in range(model.current_task + 1, stream.n_tasks + 1):
        x, y = stream.train_data(t)
        logs.append(train_task(model, stream.spec(t), x, y, config))
        row = []
        for j in range(1, t + 1):
            tx, ty = stream.test_data(j)
            row.append(evaluate_task(model, j, tx, ty))
        acc_rows.append(row)
        stream.advance()
        trained += 1
        if after_task is not None:
            after_task(model, t, logs, acc_rows)
        if stop_after is not None and trained >= stop_after:
            break
    return logs, acc_rows
