"""Decoder-only transformer with a frozen base and trainable adapters.

The base network (embeddings, attention projections, feed-forward weights,
output head) is initialized once from the config seed and never trains.
Capacity comes from three adapter groups per block:

  * low-rank pairs patched onto the attention projections
  * a sparse mixture of low-rank experts replacing the feed-forward update,
    with the frozen feed-forward kept as an always-on shared branch
  * projection heads and per-expert memory queues for the contrastive views

With all adapters at init (up-projections zero) the model reproduces the
frozen base exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .contrastive import ExpertMemoryQueue, ProjectionHead
from .errors import ConfigError, InputError
from .moe import LoraExpert, MoeLayerResult, Router, moe_layer_forward
from .seeding import derive_seed, generator
from .tensor import (
    Tensor,
    embedding,
    matmul,
    relu,
    reshape,
    rms_norm,
    silu,
    softmax_last_dim,
    transpose,
)

ACTIVATIONS = {"silu": silu, "relu": relu}


@dataclass
class ModelConfig:
    vocab_size: int = 256
    hidden_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_inner_dim: int = 128
    max_seq_len: int = 64
    activation: str = "silu"
    seed: int = 0
    # attention adapters
    attn_lora_rank: int = 4
    attn_lora_alpha: float = 8.0
    attn_lora_layers: list[bool] | None = None  # None: every layer
    # expert mixture
    num_experts: int = 4
    top_k: int = 2
    expert_rank: int = 4
    expert_alpha: float = 8.0
    router_noise_std: float = 0.0
    # contrastive heads and queues
    proj_dim: int = 64
    head_hidden_dim: int | None = None  # None: proj_dim
    head_dropout: float = 0.1
    queue_len: int = 8

    def validate(self) -> None:
        if self.vocab_size < 4:
            raise ConfigError(f"vocab_size must be >= 4, got {self.vocab_size}")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(
                f"top_k must lie in [1, {self.num_experts}], got {self.top_k}"
            )
        for name in ("num_layers", "max_seq_len", "mlp_inner_dim", "attn_lora_rank",
                     "expert_rank", "proj_dim", "queue_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.head_dropout < 1.0:
            raise ConfigError(f"head_dropout must be in [0, 1), got {self.head_dropout}")
        if self.attn_lora_layers is not None and len(self.attn_lora_layers) != self.num_layers:
            raise ConfigError(
                f"attn_lora_layers has {len(self.attn_lora_layers)} entries "
                f"for {self.num_layers} layers"
            )
        if self.router_noise_std < 0.0:
            raise ConfigError("router_noise_std must be >= 0")


@dataclass
class LoraPair:
    down: Tensor  # [r, d_in]
    up: Tensor    # [d_out, r]


@dataclass
class AttentionLoraSet:
    """One low-rank pair per attention projection (q, k, v, o)."""

    pairs: dict[str, LoraPair]
    rank: int
    alpha: float

    @staticmethod
    def init(d: int, rank: int, alpha: float, rng: np.random.Generator) -> "AttentionLoraSet":
        pairs = {}
        for name in ("q", "k", "v", "o"):
            down = Tensor(rng.normal(0.0, 1.0 / np.sqrt(rank), (rank, d)),
                          requires_grad=True)
            up = Tensor(np.zeros((d, rank)), requires_grad=True)
            pairs[name] = LoraPair(down=down, up=up)
        return AttentionLoraSet(pairs=pairs, rank=rank, alpha=alpha)

    def patched(self, name: str, base: Tensor) -> Tensor:
        """base + (alpha / rank) * up @ down, materialized as a full matrix."""
        pair = self.pairs[name]
        return base + matmul(pair.up, pair.down) * (self.alpha / self.rank)


@dataclass
class BaseMlp:
    """Frozen position-wise feed-forward: w_down(act(w_up(x)))."""

    w_up: Tensor    # [inner, d]
    w_down: Tensor  # [d, inner]
    activation: str = "silu"

    def __call__(self, x: Tensor) -> Tensor:
        act = ACTIVATIONS[self.activation]
        return matmul(act(matmul(x, transpose(self.w_up))), transpose(self.w_down))


@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    mlp: BaseMlp
    attn_lora: AttentionLoraSet | None
    experts: list[LoraExpert]
    router: Router
    head_a: ProjectionHead
    head_b: ProjectionHead


@dataclass
class LayerCapture:
    """Per-layer intermediates kept for the training objectives."""

    h_route: Tensor
    h_shared: Tensor
    router_out: object  # RouterOutput


@dataclass
class ForwardResult:
    logits: Tensor
    layers: list[LayerCapture] | None = None


def attention_forward(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                      num_heads: int) -> Tensor:
    """Multi-head causal self-attention.

    Future positions are masked with an additive -1e30 before the softmax;
    after max subtraction those weights underflow to exactly zero, so output
    at position t depends only on positions <= t, bitwise.
    """
    b, t, d = x.shape
    hd = d // num_heads
    q = reshape(matmul(x, transpose(wq)), (b, t, num_heads, hd)).transpose(0, 2, 1, 3)
    k = reshape(matmul(x, transpose(wk)), (b, t, num_heads, hd)).transpose(0, 2, 1, 3)
    v = reshape(matmul(x, transpose(wv)), (b, t, num_heads, hd)).transpose(0, 2, 1, 3)
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
    causal = np.triu(np.full((t, t), -1e30), k=1)
    att = softmax_last_dim(scores + Tensor(causal))
    ctx = matmul(att, v).transpose(0, 2, 1, 3)
    return matmul(reshape(ctx, (b, t, d)), transpose(wo))


class MoeLoraModel:
    """Frozen decoder-only base plus trainable routing, expert, and head stacks."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        d = config.hidden_dim
        rng = generator(config.seed, "model-init")

        def frozen(*shape: int, std: float = 0.02) -> Tensor:
            return Tensor(rng.normal(0.0, std, shape), requires_grad=False)

        self.tok_emb = frozen(config.vocab_size, d)
        self.pos_emb = frozen(config.max_seq_len, d)
        # the final norm has no learned gain, so its output has RMS 1; a
        # fan-in-scaled readout keeps the reachable logit range wide enough
        # for confident predictions instead of capping it near +-0.02*d
        self.lm_head = frozen(config.vocab_size, d, std=1.0 / np.sqrt(d))

        head_hidden = config.head_hidden_dim or config.proj_dim
        lora_on = config.attn_lora_layers or [True] * config.num_layers
        self.layers: list[LayerParams] = []
        self.queues: list[list[ExpertMemoryQueue]] = []
        for li in range(config.num_layers):
            wq, wk, wv, wo = (frozen(d, d) for _ in range(4))
            mlp = BaseMlp(w_up=frozen(config.mlp_inner_dim, d),
                          w_down=frozen(d, config.mlp_inner_dim),
                          activation=config.activation)
            attn_lora = (
                AttentionLoraSet.init(d, config.attn_lora_rank, config.attn_lora_alpha, rng)
                if lora_on[li] else None
            )
            experts = [
                LoraExpert.init(d, config.expert_rank, config.expert_alpha, rng)
                for _ in range(config.num_experts)
            ]
            router = Router.init(d, config.num_experts, config.top_k,
                                 config.router_noise_std, rng)
            head_a = ProjectionHead.init(d, head_hidden, config.proj_dim,
                                         config.head_dropout, rng)
            head_b = ProjectionHead.init(d, head_hidden, config.proj_dim,
                                         config.head_dropout, rng)
            self.layers.append(LayerParams(
                wq=wq, wk=wk, wv=wv, wo=wo, mlp=mlp, attn_lora=attn_lora,
                experts=experts, router=router, head_a=head_a, head_b=head_b,
            ))
            self.queues.append([
                ExpertMemoryQueue(config.queue_len, config.proj_dim)
                for _ in range(config.num_experts)
            ])

    # -- parameter access -------------------------------------------------

    def named_trainables(self) -> list[tuple[str, Tensor]]:
        """Stable (name, tensor) list; the order defines checkpoint layout."""
        out: list[tuple[str, Tensor]] = []
        for li, layer in enumerate(self.layers):
            prefix = f"layers.{li}"
            if layer.attn_lora is not None:
                for pname, pair in layer.attn_lora.pairs.items():
                    out.append((f"{prefix}.attn_lora.{pname}.down", pair.down))
                    out.append((f"{prefix}.attn_lora.{pname}.up", pair.up))
            for ei, expert in enumerate(layer.experts):
                out.append((f"{prefix}.experts.{ei}.down", expert.down))
                out.append((f"{prefix}.experts.{ei}.up", expert.up))
            out.append((f"{prefix}.router.weight", layer.router.weight))
            for hname, head in (("head_a", layer.head_a), ("head_b", layer.head_b)):
                out.append((f"{prefix}.{hname}.w1", head.w1))
                out.append((f"{prefix}.{hname}.w2", head.w2))
        return out

    def trainables(self) -> list[Tensor]:
        return [t for _, t in self.named_trainables()]

    # -- forward passes ----------------------------------------------------

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise InputError(f"tokens must be [batch, time], got shape {tokens.shape}")
        if tokens.shape[1] < 1:
            raise InputError("empty sequence")
        if tokens.shape[1] > self.config.max_seq_len:
            raise ConfigError(
                f"sequence length {tokens.shape[1]} exceeds "
                f"max_seq_len {self.config.max_seq_len}"
            )
        return tokens

    def _embed(self, tokens: np.ndarray) -> Tensor:
        pos = np.arange(tokens.shape[1])
        return embedding(self.tok_emb, tokens) + embedding(self.pos_emb, pos)

    def lm_forward(self, tokens: np.ndarray, *, noise_seed: int | None = None,
                   collect: bool = False) -> ForwardResult:
        """Adapter path: patched attention plus routed expert blocks.

        `noise_seed` enables router exploration noise (training only); each
        layer derives its own stream from it.
        """
        tokens = self._check_tokens(tokens)
        x = self._embed(tokens)
        captures: list[LayerCapture] | None = [] if collect else None
        for li, layer in enumerate(self.layers):
            h = rms_norm(x)
            if layer.attn_lora is not None:
                wq = layer.attn_lora.patched("q", layer.wq)
                wk = layer.attn_lora.patched("k", layer.wk)
                wv = layer.attn_lora.patched("v", layer.wv)
                wo = layer.attn_lora.patched("o", layer.wo)
            else:
                wq, wk, wv, wo = layer.wq, layer.wk, layer.wv, layer.wo
            x = x + attention_forward(h, wq, wk, wv, wo, self.config.num_heads)
            seed_l = derive_seed(noise_seed, "layer", li) if noise_seed is not None else None
            moe_out: MoeLayerResult = moe_layer_forward(
                rms_norm(x), layer.experts, layer.router, layer.mlp, seed_l,
            )
            x = x + moe_out.h_final
            if captures is not None:
                captures.append(LayerCapture(
                    h_route=moe_out.h_route,
                    h_shared=moe_out.h_shared,
                    router_out=moe_out.router_out,
                ))
        logits = matmul(rms_norm(x), transpose(self.lm_head))
        return ForwardResult(logits=logits, layers=captures)

    def base_forward(self, tokens: np.ndarray) -> ForwardResult:
        """Frozen path: no adapters, no routing, feed-forward as-is."""
        tokens = self._check_tokens(tokens)
        x = self._embed(tokens)
        for layer in self.layers:
            x = x + attention_forward(rms_norm(x), layer.wq, layer.wk, layer.wv,
                                      layer.wo, self.config.num_heads)
            x = x + layer.mlp(rms_norm(x))
        logits = matmul(rms_norm(x), transpose(self.lm_head))
        return ForwardResult(logits=logits)
