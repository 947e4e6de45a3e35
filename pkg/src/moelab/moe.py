"""Sparse mixture of low-rank experts with a shared dense residual.

A layer replaces the usual feed-forward update with

    h_final = shared_mlp(x) + sum_i gates_i * expert_i(x)

where each expert is a rank-r adapter pair, the gates come from a top-k
softmax router, and the shared branch is the frozen base MLP. Gates outside
the selected top-k are exactly zero, in value and in gradient: selection
adds a large negative constant to unselected logits before the softmax, so
unselected experts and their logits receive no gradient at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .seeding import generator
from .tensor import Tensor, matmul, slice_last, softmax_last_dim, tensor_mean, transpose

# Additive mask value for unselected logits. After the stabilizing max
# subtraction inside softmax, exp(-1e30 + finite) underflows to exactly 0.
_MASK_VALUE = -1e30


@dataclass
class LoraExpert:
    """Rank-r adapter: x -> (alpha / r) * up(down(x)).

    `down` has shape [r, d], `up` has shape [d, r]. With `up` at its zero
    init the expert is an exact zero map, so a fresh model reproduces the
    frozen base bit for bit.
    """

    down: Tensor
    up: Tensor
    rank: int
    alpha: float

    @staticmethod
    def init(d: int, rank: int, alpha: float, rng: np.random.Generator) -> "LoraExpert":
        down = Tensor(rng.normal(0.0, 1.0 / np.sqrt(rank), (rank, d)), requires_grad=True)
        up = Tensor(np.zeros((d, rank)), requires_grad=True)
        return LoraExpert(down=down, up=up, rank=rank, alpha=alpha)

    def __call__(self, x: Tensor) -> Tensor:
        low = matmul(x, transpose(self.down))
        return matmul(low, transpose(self.up)) * (self.alpha / self.rank)


@dataclass
class Router:
    """Linear scorer over experts with top-k selection.

    Optional Gaussian exploration noise is added to the logits before
    selection; it is drawn from a counter-based stream, so passing the same
    seed reproduces the same decision.
    """

    weight: Tensor  # [n, d]
    num_experts: int
    top_k: int
    noise_std: float = 0.0

    def __post_init__(self):
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(
                f"top_k must lie in [1, {self.num_experts}], got {self.top_k}"
            )
        if self.weight.shape[0] != self.num_experts:
            raise ConfigError(
                f"router weight has {self.weight.shape[0]} rows "
                f"for {self.num_experts} experts"
            )

    @staticmethod
    def init(d: int, num_experts: int, top_k: int, noise_std: float,
             rng: np.random.Generator) -> "Router":
        w = Tensor(rng.normal(0.0, 0.02, (num_experts, d)), requires_grad=True)
        return Router(weight=w, num_experts=num_experts, top_k=top_k,
                      noise_std=noise_std)


@dataclass
class RouterOutput:
    """Routing decision for a batch of token states.

    gates    [..., n] post-softmax weights, exactly zero outside the top-k
    selected [..., k] chosen expert indices, ties broken toward lower index
    logits   [..., n] pre-softmax scores (noise included when active)
    """

    gates: Tensor
    selected: np.ndarray
    logits: Tensor


def route(router: Router, x: Tensor, noise_seed: int | None = None) -> RouterOutput:
    """Score, select top-k, and renormalize over the selected experts only.

    The softmax runs over logits with unselected entries pushed to -1e30,
    which is equivalent to a softmax over the selected k alone: gate values
    outside the selection underflow to exactly 0, and since d(softmax)/d(logit)
    scales every term by the output gate, those logits get exact zero gradient.
    """
    logits = matmul(x, transpose(router.weight))
    if router.noise_std > 0.0 and noise_seed is not None:
        noise = generator(noise_seed).normal(0.0, router.noise_std, logits.shape)
        logits = logits + Tensor(noise)
    # stable argsort on negated scores: equal logits resolve to the lower index
    order = np.argsort(-logits.data, axis=-1, kind="stable")
    selected = order[..., : router.top_k]
    mask = np.full(logits.shape, _MASK_VALUE)
    np.put_along_axis(mask, selected, 0.0, axis=-1)
    gates = softmax_last_dim(logits + Tensor(mask))
    return RouterOutput(gates=gates, selected=selected, logits=logits)


@dataclass
class MoeLayerResult:
    h_final: Tensor
    h_route: Tensor
    h_shared: Tensor
    router_out: RouterOutput


def moe_layer_forward(
    x: Tensor,
    experts: list[LoraExpert],
    router: Router,
    shared_mlp,
    noise_seed: int | None = None,
) -> MoeLayerResult:
    """Gate-weighted sum of expert outputs plus the shared branch.

    Every expert is evaluated densely and multiplied by its gate column; the
    zero gates kill both value and gradient for unselected experts, so the
    dense sum equals the sparse sum exactly.
    """
    if len(experts) != router.num_experts:
        raise ConfigError(
            f"router expects {router.num_experts} experts, got {len(experts)}"
        )
    router_out = route(router, x, noise_seed)
    h_route: Tensor | None = None
    for i, expert in enumerate(experts):
        gate_i = slice_last(router_out.gates, i, i + 1)
        term = gate_i * expert(x)
        h_route = term if h_route is None else h_route + term
    h_shared = shared_mlp(x)
    return MoeLayerResult(
        h_final=h_shared + h_route,
        h_route=h_route,
        h_shared=h_shared,
        router_out=router_out,
    )


def routing_stats(router_out: RouterOutput) -> Tensor:
    """Mean gate mass per expert over all leading positions: shape [n].

    Stays in the graph so the balance loss can push gradients back into the
    router. Entries sum to 1 because each token's gates sum to 1.
    """
    gates = router_out.gates
    lead = tuple(range(gates.ndim - 1))
    return tensor_mean(gates, axis=lead)
