"""Two-view contrastive objective over routed hidden states.

View A projects the routed mixture output; view B projects the same state
with the shared-branch output fused in. The two views of one token form the
positive pair. Negatives are drawn from per-expert memory queues holding
recent view-B vectors, written under each token's highest-gate expert.
Queue contents are stored detached: negatives are constants to the graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, InputError
from .moe import RouterOutput
from .seeding import generator
from .tensor import (
    Tensor,
    dropout,
    exp,
    l2_normalize_last,
    log,
    matmul,
    relu,
    tensor_mean,
    tensor_sum,
    transpose,
)


@dataclass
class ContrastiveConfig:
    """Knobs for the contrastive term.

    temperature   softmax sharpness of the similarity logits
    fusion_weight scale on the shared-branch state mixed into view B
    num_negatives draw size per loss call; None means the whole pool
        (experts * queue_len)
    normalize     compare directions (cosine) instead of raw dot products
    """

    temperature: float = 0.07
    fusion_weight: float = 1.0
    num_negatives: int | None = None
    normalize: bool = True

    def validate(self) -> None:
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.num_negatives is not None and self.num_negatives < 0:
            raise ConfigError("num_negatives must be nonnegative")


@dataclass
class ProjectionHead:
    """Two-layer ReLU projector with dropout on the input.

    The dropout mask comes from the seed passed at call time, so the two
    views of one state can draw independent masks and any call can be
    replayed exactly.
    """

    w1: Tensor  # [h, d]
    w2: Tensor  # [d_out, h]
    dropout_rate: float = 0.1

    @staticmethod
    def init(d_in: int, hidden: int, d_out: int, dropout_rate: float,
             rng: np.random.Generator) -> "ProjectionHead":
        w1 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), (hidden, d_in)),
                    requires_grad=True)
        w2 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden), (d_out, hidden)),
                    requires_grad=True)
        return ProjectionHead(w1=w1, w2=w2, dropout_rate=dropout_rate)

    def __call__(self, x: Tensor, seed: int, train: bool) -> Tensor:
        rate = self.dropout_rate if train else 0.0
        h = dropout(x, rate, seed)
        return matmul(relu(matmul(h, transpose(self.w1))), transpose(self.w2))


def project_view_a(head: ProjectionHead, h_route: Tensor, seed: int,
                   train: bool = True) -> Tensor:
    """Project the routed output alone."""
    return head(h_route, seed, train)


def project_view_b(head: ProjectionHead, h_route: Tensor, h_shared: Tensor,
                   fusion_weight: float, seed: int, train: bool = True) -> Tensor:
    """Project the routed output with the shared branch fused in."""
    fused = h_route + h_shared * fusion_weight
    return head(fused, seed, train)


class ExpertMemoryQueue:
    """Fixed-capacity FIFO ring of detached feature rows for one expert.

    Writes go to `write_ptr` and advance it modulo the capacity, overwriting
    the oldest entry once full. Rows at index >= `filled` are uninitialized
    and never leave the queue.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ConfigError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self.buffer = np.zeros((capacity, dim))
        self.write_ptr = 0
        self.filled = 0

    def push(self, row: np.ndarray) -> None:
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (self.dim,):
            raise InputError(f"queue row shape {row.shape}, expected ({self.dim},)")
        self.buffer[self.write_ptr] = row
        self.write_ptr = (self.write_ptr + 1) % self.capacity
        self.filled = min(self.filled + 1, self.capacity)

    def rows(self) -> np.ndarray:
        """Valid rows only, in slot order."""
        return self.buffer[: self.filled]


def enqueue(queues: list[ExpertMemoryQueue], z_b: np.ndarray,
            router_out: RouterOutput) -> None:
    """Write each token's view-B vector into its top-gate expert's queue.

    `z_b` must already be detached (a plain array). Tokens are written in
    row-major order so replays are deterministic. The queues copy every row;
    later graph reuse cannot alias queue memory.
    """
    z_b = np.asarray(z_b, dtype=np.float64)
    flat = z_b.reshape(-1, z_b.shape[-1])
    owners = np.argmax(router_out.gates.data, axis=-1).reshape(-1)
    if owners.shape[0] != flat.shape[0]:
        raise ContractError(
            f"{flat.shape[0]} feature rows but {owners.shape[0]} routing decisions"
        )
    for row, owner in zip(flat, owners):
        queues[int(owner)].push(row)


def sample_negatives(queues: list[ExpertMemoryQueue], num: int,
                     seed: int) -> np.ndarray | None:
    """Uniform sample without replacement from all filled rows of all queues.

    Returns min(num, available) rows, or None when every queue is empty.
    The pool is ordered by (queue index, slot index), so a fixed seed and
    fixed queue state give an identical sample.
    """
    pools = [q.rows() for q in queues]
    available = sum(p.shape[0] for p in pools)
    if available == 0 or num <= 0:
        return None
    pool = np.concatenate([p for p in pools if p.shape[0] > 0], axis=0)
    take = min(num, available)
    idx = generator(seed).choice(available, size=take, replace=False)
    return pool[idx].copy()


def info_nce(z_a: Tensor, z_b: Tensor, negatives: np.ndarray | None,
             temperature: float, normalize: bool = True) -> Tensor:
    """Mean InfoNCE over rows: positives on the diagonal pairing of A and B.

    Negatives are constants (no gradient flows into the queue). With no
    negatives available the positive logit is the only logit, so the loss is
    exactly zero; an explicit constant keeps that case out of the graph.
    The row-wise log-sum-exp subtracts a detached max for stability.
    """
    if temperature <= 0.0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise ContractError(f"view shapes differ: {z_a.shape} vs {z_b.shape}")
    if negatives is None or negatives.shape[0] == 0:
        return Tensor(0.0)
    if normalize:
        z_a = l2_normalize_last(z_a)
        z_b = l2_normalize_last(z_b)
        norms = np.linalg.norm(negatives, axis=-1, keepdims=True)
        negatives = negatives / np.maximum(norms, 1e-6)

    inv_t = 1.0 / temperature
    pos = tensor_sum(z_a * z_b, axis=-1) * inv_t               # [N]
    neg = matmul(z_a, Tensor(negatives.T)) * inv_t             # [N, M]

    shift = np.maximum(pos.data, neg.data.max(axis=-1))        # detached [N]
    e_pos = exp(pos - Tensor(shift))
    e_neg = tensor_sum(exp(neg - Tensor(shift[:, None])), axis=-1)
    log_denom = log(e_pos + e_neg) + Tensor(shift)
    return tensor_mean(log_denom - pos)
