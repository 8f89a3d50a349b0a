"""Per-task multi-head self-attention over backbone feature tokens.

Each fused feature vector is viewed as one token per backbone. A task's
attention block mixes those tokens with standard scaled dot-product
attention (scores divided by sqrt(head_dim)) using its own learned Q/K/V
maps. When backbone dimensions differ, each backbone's slice is first
passed through a learned projection down to the shared token width.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError


def scaled_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    """U(-s, s) with s = 1/sqrt(fan_in), drawn in float64 then cast."""
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape).astype(dtype)


def multi_head_attention(
    tokens: T.Tensor,
    w_q: T.Tensor,
    w_k: T.Tensor,
    w_v: T.Tensor,
    heads: int,
    scale: float,
) -> tuple[T.Tensor, T.Tensor]:
    """Self-attention over `tokens` [batch, n, d]; returns (output, weights).

    Scores are (Q K^T) / scale, softmaxed over the key axis. The returned
    attention weights have shape [batch, heads, n, n].
    """
    if tokens.ndim != 3:
        raise ShapeError(f"attention expects [batch, tokens, dim], got {tokens.shape}")
    b, n, d = tokens.shape
    if d % heads != 0:
        raise ShapeError(f"token dim {d} not divisible by {heads} heads")
    hd = d // heads

    def split_heads(x: T.Tensor) -> T.Tensor:
        return T.transpose(T.reshape(x, (b, n, heads, hd)), (0, 2, 1, 3))

    q = split_heads(T.matmul(tokens, w_q))
    k = split_heads(T.matmul(tokens, w_k))
    v = split_heads(T.matmul(tokens, w_v))
    scores = T.div(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
    weights = T.softmax(scores, axis=-1)
    ctx = T.matmul(weights, v)
    out = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    return out, weights


def tokenize(z_f: T.Tensor, backbone_dims: list[int]) -> T.Tensor:
    """View a fused vector as one token per backbone.

    Requires all backbone dims equal (projection handles the ragged case
    inside the block). Accepts [d_f] or [batch, d_f]; returns
    [n_backbones, w] or [batch, n_backbones, w].
    """
    if len(set(backbone_dims)) != 1:
        raise ValidationError(f"tokenize needs equal backbone dims, got {backbone_dims}")
    n, w = len(backbone_dims), backbone_dims[0]
    total = n * w
    if z_f.shape[-1] != total:
        raise ShapeError(f"fused dim {z_f.shape[-1]} != sum of backbone dims {total}")
    if z_f.ndim == 1:
        return T.reshape(z_f, (n, w))
    if z_f.ndim == 2:
        return T.reshape(z_f, (z_f.shape[0], n, w))
    raise ShapeError(f"tokenize expects a vector or batch of vectors, got {z_f.shape}")


class AttentionBlock:
    """One task's token mixer over the fused backbone features."""

    def __init__(
        self,
        task_id: int,
        backbone_dims: list[int],
        heads: int,
        rng: np.random.Generator,
        dtype=np.float32,
        token_dim: int | None = None,
    ):
        if token_dim is None:
            token_dim = min(backbone_dims)
        if token_dim % heads != 0:
            raise ValidationError(f"token dim {token_dim} not divisible by {heads} heads")
        self.task_id = task_id
        self.backbone_dims = list(backbone_dims)
        self.token_dim = token_dim
        self.heads = heads
        self.head_dim = token_dim // heads
        prefix = f"task{task_id:02d}.deam"
        self.w_q = T.Parameter(scaled_uniform(rng, (token_dim, token_dim), token_dim, dtype), f"{prefix}.wq")
        self.w_k = T.Parameter(scaled_uniform(rng, (token_dim, token_dim), token_dim, dtype), f"{prefix}.wk")
        self.w_v = T.Parameter(scaled_uniform(rng, (token_dim, token_dim), token_dim, dtype), f"{prefix}.wv")
        self.projections: list[T.Parameter] | None = None
        if any(d != token_dim for d in backbone_dims):
            self.projections = [
                T.Parameter(scaled_uniform(rng, (d, token_dim), d, dtype), f"{prefix}.proj{j}")
                for j, d in enumerate(backbone_dims)
            ]

    @property
    def n_tokens(self) -> int:
        return len(self.backbone_dims)

    def parameters(self) -> list[T.Parameter]:
        out = [self.w_q, self.w_k, self.w_v]
        if self.projections:
            out.extend(self.projections)
        return out

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.parameters())

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def _tokens(self, z_f: T.Tensor) -> T.Tensor:
        """[batch, d_f] -> [batch, n_tokens, token_dim]."""
        if self.projections is None:
            return tokenize(z_f, self.backbone_dims)
        parts, off = [], 0
        for proj, d in zip(self.projections, self.backbone_dims):
            piece = T.slice_axis(z_f, 1, off, off + d)
            parts.append(T.matmul(piece, proj.value))
            off += d
        return T.stack(parts, axis=1)

    def forward(self, z_f: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
        """Fused features [batch, d_f] -> (mixed tokens [batch, n, w], attn weights)."""
        expected = sum(self.backbone_dims)
        if z_f.ndim != 2 or z_f.shape[1] != expected:
            raise ShapeError(f"expected [batch, {expected}] fused features, got {z_f.shape}")
        tokens = self._tokens(z_f)
        return multi_head_attention(
            tokens, self.w_q.value, self.w_k.value, self.w_v.value,
            self.heads, float(np.sqrt(self.head_dim)),
        )


def apply_attention(block: AttentionBlock, tokens: T.Tensor) -> T.Tensor:
    """Single-record surface: mix a [n_tokens, token_dim] matrix."""
    if tokens.ndim != 2:
        raise ShapeError(f"apply_attention expects [n_tokens, token_dim], got {tokens.shape}")
    if tokens.shape != (block.n_tokens, block.token_dim):
        raise ShapeError(
            f"token matrix {tokens.shape} does not match block ({block.n_tokens}, {block.token_dim})"
        )
    batched = T.reshape(tokens, (1, *tokens.shape))
    out, _ = multi_head_attention(
        batched, block.w_q.value, block.w_k.value, block.w_v.value,
        block.heads, float(np.sqrt(block.head_dim)),
    )
    return T.reshape(out, tokens.shape)


class GraphAttentionBlock:
    """Attention over the router-weighted expert representations.

    Operates on t tokens of width d_e (one per routable expert) and is
    scaled by sqrt(d_e), the full representation width.
    """

    def __init__(self, task_id: int, d_e: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if d_e % heads != 0:
            raise ValidationError(f"representation dim {d_e} not divisible by {heads} heads")
        self.task_id = task_id
        self.d_e = d_e
        self.heads = heads
        self.head_dim = d_e // heads
        prefix = f"task{task_id:02d}.graph"
        self.w_q = T.Parameter(scaled_uniform(rng, (d_e, d_e), d_e, dtype), f"{prefix}.wq")
        self.w_k = T.Parameter(scaled_uniform(rng, (d_e, d_e), d_e, dtype), f"{prefix}.wk")
        self.w_v = T.Parameter(scaled_uniform(rng, (d_e, d_e), d_e, dtype), f"{prefix}.wv")

    def parameters(self) -> list[T.Parameter]:
        return [self.w_q, self.w_k, self.w_v]

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.parameters())

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def forward(self, expert_tokens: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
        """[batch, t, d_e] -> (attended [batch, t, d_e], attn weights)."""
        if expert_tokens.ndim != 3 or expert_tokens.shape[2] != self.d_e:
            raise ShapeError(f"expected [batch, t, {self.d_e}], got {expert_tokens.shape}")
        return multi_head_attention(
            expert_tokens, self.w_q.value, self.w_k.value, self.w_v.value,
            self.heads, float(np.sqrt(self.d_e)),
        )
