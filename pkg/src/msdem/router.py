"""Growing expert-relation matrix and tempered stochastic routing.

Task t owns a positive relevance row over experts 1..t (initialised to
ones, so a new task starts by listening to everyone equally). During
training the row is pushed through a tempered, noise-perturbed softmax:

    weight_k  propto  exp((log(clamp(M_k + n_k, lo)) + g_k) / tau)

with n_k Gaussian (scale sigma) and g_k standard Gumbel. Low temperature
drives the weights towards one-hot; high temperature towards uniform.
Evaluation drops both noise terms, leaving the deterministic tempered
softmax of log M. Earlier tasks' rows freeze when a new task opens, and a
row never has entries for experts that did not exist yet, which is what
keeps old tasks' routing decisions immune to later growth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError

CLAMP_LO = 1e-6


@dataclass
class RouterSample:
    """One draw of routing weights plus everything needed to replay it."""

    weights: np.ndarray          # [t] float, sums to 1
    tensor: T.Tensor             # same values, attached to the autodiff graph
    tau: float
    sigma: float
    seed: int | None
    deterministic: bool


def _check_temperature(tau: float, sigma: float) -> None:
    if not np.isfinite(tau) or tau <= 0:
        raise ValidationError(f"temperature must be positive and finite, got {tau}")
    if not np.isfinite(sigma) or sigma < 0:
        raise ValidationError(f"noise scale must be non-negative and finite, got {sigma}")


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard Gumbel(0, 1) draws via -log(-log(U))."""
    u = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def router_logits(
    m_row: T.Tensor,
    tau: float,
    normal_noise: np.ndarray | None,
    gumbel: np.ndarray | None,
    clamp_lo: float = CLAMP_LO,
) -> T.Tensor:
    """The shared (log clamp(M + n) + g) / tau pipeline on the graph."""
    noisy = m_row if normal_noise is None else T.add(m_row, T.Tensor(normal_noise.astype(m_row.dtype)))
    logit = T.log(T.clamp_min(noisy, clamp_lo))
    if gumbel is not None:
        logit = T.add(logit, T.Tensor(gumbel.astype(m_row.dtype)))
    return T.div(logit, tau)


def gumbel_softmax_weights(
    m_row,
    tau: float,
    sigma: float,
    seed: int | None = None,
    deterministic: bool = False,
    clamp_lo: float = CLAMP_LO,
) -> RouterSample:
    """Sample routing weights for one relevance row (vector of length t).

    `m_row` may be a raw array or a graph Tensor; gradients flow to the
    row either way the caller set up. Stochastic sampling requires a seed.
    """
    _check_temperature(tau, sigma)
    row_t = m_row if isinstance(m_row, T.Tensor) else T.Tensor(m_row)
    if row_t.ndim != 1 or row_t.shape[0] == 0:
        raise ShapeError(f"relevance row must be a non-empty vector, got {row_t.shape}")
    if deterministic:
        normal_noise = gumbel = None
    else:
        if seed is None:
            raise ValidationError("stochastic routing requires a seed")
        rng = np.random.Generator(np.random.PCG64(seed))
        normal_noise = rng.normal(0.0, sigma, size=row_t.shape)
        gumbel = gumbel_noise(rng, row_t.shape)
    weights = T.softmax(router_logits(row_t, tau, normal_noise, gumbel, clamp_lo), axis=-1)
    return RouterSample(
        weights=weights.data.astype(np.float64).copy(),
        tensor=weights,
        tau=tau,
        sigma=sigma,
        seed=seed,
        deterministic=deterministic,
    )


def batched_router_weights(
    m_row: T.Tensor,
    tau: float,
    sigma: float,
    rng: np.random.Generator | None,
    batch: int,
    deterministic: bool,
    clamp_lo: float = CLAMP_LO,
) -> T.Tensor:
    """Per-record weight draws for a training batch.

    Returns [batch, t] in stochastic mode and a broadcastable [1, t] in
    deterministic mode (every record routes identically).
    """
    _check_temperature(tau, sigma)
    t = m_row.shape[0]
    row = T.reshape(m_row, (1, t))
    if deterministic:
        return T.softmax(router_logits(row, tau, None, None, clamp_lo), axis=-1)
    if rng is None:
        raise ValidationError("stochastic routing requires an RNG")
    normal_noise = rng.normal(0.0, sigma, size=(batch, t))
    gumbel = gumbel_noise(rng, (batch, t))
    return T.softmax(router_logits(row, tau, normal_noise, gumbel, clamp_lo), axis=-1)


class RelationMatrix:
    """Lower-triangular growing matrix of task-to-expert relevances.

    Row t (length t) is a separate parameter created when task t opens;
    absent cells simply do not exist, so no masking arithmetic is needed.
    """

    def __init__(self):
        self._rows: dict[int, T.Parameter] = {}

    @property
    def n_tasks(self) -> int:
        return len(self._rows)

    def expand(self, task_id: int, dtype=np.float32) -> T.Parameter:
        if task_id != self.n_tasks + 1:
            raise ValidationError(f"expected expansion to row {self.n_tasks + 1}, got {task_id}")
        row = T.Parameter(np.ones(task_id, dtype=dtype), f"task{task_id:02d}.relation_row")
        self._rows[task_id] = row
        return row

    def row(self, task_id: int) -> T.Parameter:
        if task_id not in self._rows:
            raise ValidationError(f"no relevance row for task {task_id}")
        return self._rows[task_id]

    def rows(self) -> list[T.Parameter]:
        return [self._rows[i] for i in range(1, self.n_tasks + 1)]

    def deterministic_weights(self, task_id: int, tau: float, clamp_lo: float = CLAMP_LO) -> np.ndarray:
        """Noise-free routing weights for row `task_id`, in float64."""
        _check_temperature(tau, 0.0)
        row = self._rows[task_id].data.astype(np.float64)
        logits = np.log(np.maximum(row, clamp_lo)) / tau
        e = np.exp(logits - logits.max())
        return e / e.sum()

    def as_matrix(self, tau: float, clamp_lo: float = CLAMP_LO) -> np.ndarray:
        """Deterministic weights as a square [n, n] array, zero above the diagonal."""
        n = self.n_tasks
        out = np.zeros((n, n), dtype=np.float64)
        for t in range(1, n + 1):
            out[t - 1, :t] = self.deterministic_weights(t, tau, clamp_lo)
        return out


def combine_expert_tokens(expert_reps: list[T.Tensor], sample: RouterSample) -> tuple[T.Tensor, T.Tensor]:
    """Weight each expert representation [d_e]; return ([t, d_e], pooled [d_e])."""
    if len(expert_reps) != sample.weights.shape[0]:
        raise ShapeError(f"{len(expert_reps)} representations for {sample.weights.shape[0]} weights")
    stacked = T.stack(expert_reps, axis=0)
    weighted = T.mul(stacked, T.reshape(sample.tensor, (len(expert_reps), 1)))
    return weighted, T.tsum(weighted, axis=0)
