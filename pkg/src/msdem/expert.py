"""Per-task expert: adaptive feature map plus a task-local classifier.

The adapter flattens the task's mixed tokens and applies an affine map
followed by GELU, yielding the task representation. The classifier is a
plain affine map to the task's own classes; its weights start near zero
so an untrained expert scores all classes almost evenly.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import scaled_uniform
from .errors import ShapeError, ValidationError


class Expert:
    def __init__(
        self,
        task_id: int,
        n_tokens: int,
        token_dim: int,
        d_e: int,
        class_ids: tuple[int, ...],
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        if len(class_ids) < 2:
            raise ValidationError(f"task {task_id}: an expert needs at least 2 classes")
        if len(set(class_ids)) != len(class_ids):
            raise ValidationError(f"task {task_id}: duplicate class ids {class_ids}")
        self.task_id = task_id
        self.class_ids = tuple(class_ids)
        self.in_dim = n_tokens * token_dim
        self.d_e = d_e
        k = len(class_ids)
        prefix = f"task{task_id:02d}.expert"
        self.adapt_w = T.Parameter(
            scaled_uniform(rng, (self.in_dim, d_e), self.in_dim, dtype), f"{prefix}.adapt_w"
        )
        self.adapt_b = T.Parameter(np.zeros(d_e, dtype=dtype), f"{prefix}.adapt_b")
        # deliberately small: first-batch loss should sit at ~log(n_classes)
        self.cls_w = T.Parameter(
            (rng.uniform(-1.0, 1.0, size=(d_e, k)) / d_e).astype(dtype), f"{prefix}.cls_w"
        )
        self.cls_b = T.Parameter(np.zeros(k, dtype=dtype), f"{prefix}.cls_b")

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    def parameters(self) -> list[T.Parameter]:
        return [self.adapt_w, self.adapt_b, self.cls_w, self.cls_b]

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.parameters())

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def adapt(self, tokens: T.Tensor) -> T.Tensor:
        """Mixed tokens [batch, n, w] -> representation [batch, d_e]."""
        if tokens.ndim != 3:
            raise ShapeError(f"adapt expects [batch, n_tokens, token_dim], got {tokens.shape}")
        b = tokens.shape[0]
        flat = T.reshape(tokens, (b, tokens.shape[1] * tokens.shape[2]))
        if flat.shape[1] != self.in_dim:
            raise ShapeError(f"flattened token dim {flat.shape[1]} != adapter input {self.in_dim}")
        return T.gelu(T.add(T.matmul(flat, self.adapt_w.value), self.adapt_b.value))

    def classify_logits(self, rep: T.Tensor) -> T.Tensor:
        """Representation [batch, d_e] -> logits [batch, n_classes]."""
        if rep.ndim != 2 or rep.shape[1] != self.d_e:
            raise ShapeError(f"expected [batch, {self.d_e}] representations, got {rep.shape}")
        return T.add(T.matmul(rep, self.cls_w.value), self.cls_b.value)

    def classify(self, rep: T.Tensor) -> tuple[T.Tensor, int]:
        """Single representation [d_e] -> (logits [n_classes], global class id).

        Ties resolve to the lowest class index.
        """
        if rep.ndim != 1 or rep.shape[0] != self.d_e:
            raise ShapeError(f"expected a [{self.d_e}] representation, got {rep.shape}")
        logits = self.classify_logits(T.reshape(rep, (1, self.d_e)))
        logits = T.reshape(logits, (self.n_classes,))
        return logits, self.class_ids[int(np.argmax(logits.data))]
