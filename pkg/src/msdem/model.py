"""The growing multi-expert model.

One expert column (token mixer, adapter, classifier, graph-attention
block, relevance row) is appended per task. Everything belonging to
earlier tasks is frozen the moment a new task opens, and the forward pass
for task t only ever reads structures that existed when task t finished
training. Those two facts together make old-task predictions immune to
any amount of later training, which the test suite checks bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import seeding
from . import tensor as T
from .attention import AttentionBlock, GraphAttentionBlock
from .errors import ConfigError, FrozenParameterError, ShapeError, ValidationError
from .expert import Expert
from .router import RelationMatrix, batched_router_weights
from .stream import BackboneSpec, FeatureRecord, TaskSpec, fuse_features


@dataclass
class ModelConfig:
    d_e: int = 512               # expert representation width
    heads: int = 32              # heads for both attention stages
    tau: float = 1.0             # routing temperature
    sigma: float = 0.1           # Gaussian perturbation scale on relevances
    clamp_lo: float = 1e-6       # floor before the routing log
    graph_attention_mode: str = "tokens"   # "tokens" or "pooled"
    dtype: str = "float32"
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.d_e < 1:
            problems.append(f"d_e must be positive, got {self.d_e}")
        if self.heads < 1:
            problems.append(f"heads must be positive, got {self.heads}")
        if self.d_e % max(self.heads, 1) != 0:
            problems.append(f"d_e {self.d_e} must be divisible by heads {self.heads}")
        if not np.isfinite(self.tau) or self.tau <= 0:
            problems.append(f"tau must be positive and finite, got {self.tau}")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            problems.append(f"sigma must be non-negative, got {self.sigma}")
        if self.clamp_lo <= 0:
            problems.append(f"clamp_lo must be positive, got {self.clamp_lo}")
        if self.graph_attention_mode not in ("tokens", "pooled"):
            problems.append(f"graph_attention_mode must be 'tokens' or 'pooled', got {self.graph_attention_mode!r}")
        if self.dtype not in ("float32", "float64"):
            problems.append(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")
        if self.seed < 0:
            problems.append(f"seed must be non-negative, got {self.seed}")
        if problems:
            raise ConfigError("invalid model config:\n  " + "\n  ".join(problems))

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


class MsdemModel:
    def __init__(self, backbones: list[BackboneSpec], config: ModelConfig):
        config.validate()
        if not backbones:
            raise ValidationError("at least one backbone is required")
        token_dim = min(bb.dim for bb in backbones)
        if token_dim % config.heads != 0:
            raise ConfigError(f"token dim {token_dim} must be divisible by heads {config.heads}")
        self.backbones = list(backbones)
        self.config = config
        self.token_dim = token_dim
        self.fused_dim = sum(bb.dim for bb in backbones)
        self.current_task = 0
        self.task_specs: dict[int, TaskSpec] = {}
        self.mixers: dict[int, AttentionBlock] = {}
        self.experts: dict[int, Expert] = {}
        self.graph_blocks: dict[int, GraphAttentionBlock] = {}
        self.relation = RelationMatrix()
        self._registry: dict[str, T.Parameter] = {}

    # ------------------------------------------------------------------
    # growth and freezing

    def _register(self, params: list[T.Parameter]) -> None:
        for p in params:
            if p.name in self._registry:
                raise ValidationError(f"duplicate parameter name {p.name!r}")
            self._registry[p.name] = p

    def begin_task(self, task: TaskSpec) -> None:
        """Freeze everything trained so far and grow a column for `task`."""
        if task.task_id != self.current_task + 1:
            raise ValidationError(
                f"tasks must arrive in order: expected {self.current_task + 1}, got {task.task_id}"
            )
        if not task.class_ids:
            raise ValidationError(f"task {task.task_id} has no classes")
        seen = {c for spec in self.task_specs.values() for c in spec.class_ids}
        overlap = seen & set(task.class_ids)
        if overlap:
            raise ValidationError(f"task {task.task_id} reuses class ids {sorted(overlap)}")

        for t in range(1, self.current_task + 1):
            self._freeze_column(t)

        t = task.task_id
        dtype = self.config.np_dtype
        dims = [bb.dim for bb in self.backbones]
        rng = seeding.derive_rng(self.config.seed, seeding.INIT, t)
        mixer = AttentionBlock(t, dims, self.config.heads, rng, dtype, token_dim=self.token_dim)
        expert = Expert(t, len(dims), self.token_dim, self.config.d_e, task.class_ids, rng, dtype)
        graph = GraphAttentionBlock(t, self.config.d_e, self.config.heads, rng, dtype)
        row = self.relation.expand(t, dtype)

        self.current_task = t
        self.task_specs[t] = task
        self.mixers[t] = mixer
        self.experts[t] = expert
        self.graph_blocks[t] = graph
        self._register([*mixer.parameters(), *expert.parameters(), *graph.parameters(), row])

    def freeze_task(self, task_id: int) -> None:
        """Freeze one completed task's column. Refuses the task in training."""
        if task_id == self.current_task:
            raise FrozenParameterError(f"task {task_id} is still training and cannot be frozen")
        if task_id not in self.task_specs:
            raise ValidationError(f"unknown task {task_id}")
        self._freeze_column(task_id)

    def _freeze_column(self, task_id: int) -> None:
        self.mixers[task_id].freeze()
        self.experts[task_id].freeze()
        self.graph_blocks[task_id].freeze()
        self.relation.row(task_id).freeze()

    # ------------------------------------------------------------------
    # parameter access

    def parameters(self) -> list[T.Parameter]:
        return list(self._registry.values())

    def trainable_parameters(self) -> list[T.Parameter]:
        return [p for p in self._registry.values() if not p.frozen]

    def parameter_groups(self, task_id: int) -> dict[str, list[T.Parameter]]:
        """The three optimizer groups for the given (current) task."""
        if task_id != self.current_task:
            raise ValidationError(f"optimizer groups exist only for the current task {self.current_task}")
        return {
            "expert": self.experts[task_id].parameters(),
            "router": [self.relation.row(task_id)],
            "attention": [*self.mixers[task_id].parameters(), *self.graph_blocks[task_id].parameters()],
        }

    def audit_frozen(self) -> None:
        """Verify every frozen parameter still holds its freeze-time bytes."""
        for p in self._registry.values():
            p.check_unchanged()

    # ------------------------------------------------------------------
    # forward

    def forward_batch(
        self,
        x: np.ndarray,
        task_id: int,
        mode: Literal["train", "eval"] = "eval",
        seed: int | None = None,
    ) -> tuple[T.Tensor, dict]:
        """Fused features [batch, d_f] -> (logits [batch, n_classes], intermediates).

        Train mode draws per-record routing noise from `seed` and is only
        valid for the current task; eval mode is deterministic and valid
        for any existing task.
        """
        if mode not in ("train", "eval"):
            raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
        if not 1 <= task_id <= self.current_task:
            raise ValidationError(f"task {task_id} does not exist (have 1..{self.current_task})")
        if mode == "train" and task_id != self.current_task:
            raise ValidationError(f"train-mode forward is only valid for the current task {self.current_task}")
        if mode == "train" and seed is None:
            raise ValidationError("train-mode forward requires a seed")
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.fused_dim:
            raise ShapeError(f"expected fused features [batch, {self.fused_dim}], got {x.shape}")
        if x.dtype != self.config.np_dtype:
            x = x.astype(self.config.np_dtype)

        fused = T.Tensor(x)
        attended: dict[int, T.Tensor] = {}
        reps: dict[int, T.Tensor] = {}
        for j in range(1, task_id + 1):
            mixed, _ = self.mixers[j].forward(fused)
            attended[j] = mixed
            reps[j] = self.experts[j].adapt(mixed)

        row = self.relation.row(task_id).value
        if mode == "train":
            rng = np.random.Generator(np.random.PCG64(seed))
            weights = batched_router_weights(
                row, self.config.tau, self.config.sigma, rng, x.shape[0],
                deterministic=False, clamp_lo=self.config.clamp_lo,
            )
        else:
            weights = batched_router_weights(
                row, self.config.tau, self.config.sigma, None, x.shape[0],
                deterministic=True, clamp_lo=self.config.clamp_lo,
            )

        stacked = T.stack([reps[j] for j in range(1, task_id + 1)], axis=1)  # [B, t, d_e]
        w3 = T.reshape(weights, (weights.shape[0], task_id, 1))
        weighted = T.mul(stacked, w3)
        pooled = T.tsum(weighted, axis=1)

        if self.config.graph_attention_mode == "tokens":
            graph_tokens = weighted
        else:
            graph_tokens = T.reshape(pooled, (pooled.shape[0], 1, self.config.d_e))
        graph_out, graph_attn = self.graph_blocks[task_id].forward(graph_tokens)
        final_rep = T.tmean(graph_out, axis=1)

        logits = self.experts[task_id].classify_logits(final_rep)
        intermediates = {
            "fused": fused,
            "attended": attended,
            "expert_reps": reps,
            "router_weights": weights,
            "weighted_reps": weighted,
            "combined": pooled,
            "graph_attn": graph_attn,
            "final_rep": final_rep,
        }
        return logits, intermediates

    def forward(
        self,
        record: FeatureRecord,
        task_id: int,
        mode: Literal["train", "eval"] = "eval",
        seed: int | None = None,
    ) -> tuple[T.Tensor, dict]:
        """Single-record surface over forward_batch; logits come back 1-D."""
        x = fuse_features(record, self.backbones)[None, :]
        logits, inter = self.forward_batch(x, task_id, mode, seed)
        return T.reshape(logits, (logits.shape[1],)), inter

    def predict_batch(self, x: np.ndarray, task_id: int) -> np.ndarray:
        """Deterministic global class ids for fused features [batch, d_f].

        Argmax ties resolve to the lowest class index.
        """
        logits, _ = self.forward_batch(x, task_id, mode="eval")
        idx = np.argmax(logits.data, axis=1)
        return np.asarray(self.task_specs[task_id].class_ids, dtype=np.int64)[idx]

    def predict(self, record: FeatureRecord, task_id: int) -> int:
        x = fuse_features(record, self.backbones)[None, :]
        return int(self.predict_batch(x, task_id)[0])
