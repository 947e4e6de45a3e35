"""End-to-end gradient verification of the joint objective.

Builds a small model, randomizes every trainable tensor away from the
degenerate zero-adapter init, prefills the memory queues, and compares
backward gradients of the full loss (masked LM + balance + contrastive)
against central finite differences, coordinate by coordinate.

Dropout runs with fixed masks; router noise stays off. Top-k selection and
ReLU gates make the loss piecewise smooth, so the harness uses a pinned
seed whose evaluation point sits away from every decision boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .contrastive import ContrastiveConfig, info_nce, project_view_a, project_view_b, sample_negatives
from .losses import LossWeights, balance_loss, lm_loss, total_loss
from .model import ModelConfig, MoeLoraModel
from .moe import routing_stats
from .seeding import derive_seed, generator
from .tensor import Tensor, finite_difference_check
from .training import _mean_tensors

DEFAULT_GRADCHECK_MODEL = ModelConfig(
    vocab_size=64,
    hidden_dim=16,
    num_layers=2,
    num_heads=2,
    mlp_inner_dim=32,
    max_seq_len=16,
    num_experts=4,
    top_k=2,
    attn_lora_rank=4,
    expert_rank=4,
    proj_dim=16,
    head_hidden_dim=16,
    queue_len=4,
    head_dropout=0.1,
)


@dataclass
class GradcheckResult:
    max_rel_error: float
    num_coordinates: int


def run_gradcheck(model_cfg: ModelConfig | None = None,
                  co_cfg: ContrastiveConfig | None = None,
                  weights: LossWeights | None = None,
                  seed: int = 3,
                  batch_size: int = 2,
                  seq_len: int = 8,
                  eps: float = 1e-5) -> GradcheckResult:
    model_cfg = replace(model_cfg) if model_cfg else replace(DEFAULT_GRADCHECK_MODEL)
    model_cfg.router_noise_std = 0.0
    co_cfg = co_cfg or ContrastiveConfig()
    weights = weights or LossWeights()
    model = MoeLoraModel(model_cfg)

    rng = generator(seed, "gradcheck")
    for _name, t in model.named_trainables():
        t.data = rng.normal(0.0, 0.05, t.data.shape)
    for layer_queues in model.queues:
        for q in layer_queues:
            for _ in range(q.capacity):
                q.push(rng.normal(0.0, 1.0, q.dim))

    tokens = rng.integers(0, model_cfg.vocab_size,
                          (batch_size, seq_len + 1)).astype(np.int64)
    inputs, targets = tokens[:, :-1], tokens[:, 1:]
    mask = np.ones_like(targets, dtype=bool)

    num_neg = model_cfg.num_experts * model_cfg.queue_len // 2
    negatives = [
        sample_negatives(model.queues[li], num_neg,
                         derive_seed(seed, "gradcheck-neg", li))
        for li in range(model_cfg.num_layers)
    ]

    def loss() -> Tensor:
        res = model.lm_forward(inputs, collect=True)
        lm = lm_loss(res.logits, targets, mask)
        balance = _mean_tensors(
            [balance_loss(routing_stats(c.router_out)) for c in res.layers]
        )
        co_terms = []
        for li, cap in enumerate(res.layers):
            layer = model.layers[li]
            za = project_view_a(layer.head_a, cap.h_route,
                                derive_seed(seed, "gc-view-a", li), train=True)
            zb = project_view_b(layer.head_b, cap.h_route, cap.h_shared,
                                co_cfg.fusion_weight,
                                derive_seed(seed, "gc-view-b", li), train=True)
            d_h = model_cfg.proj_dim
            co_terms.append(info_nce(za.reshape(-1, d_h), zb.reshape(-1, d_h),
                                     negatives[li], co_cfg.temperature,
                                     co_cfg.normalize))
        total, _ = total_loss(lm, balance, _mean_tensors(co_terms), weights)
        return total

    params = model.trainables()
    err = finite_difference_check(loss, params, eps=eps)
    coords = sum(p.data.size for p in params)
    return GradcheckResult(max_rel_error=err, num_coordinates=coords)
