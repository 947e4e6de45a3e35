"""Joint training loop: masked LM + usage balance + two-view contrastive.

One optimizer step builds a single graph over all of its micro-batches:
the LM term is a mean over the union of masked positions, the balance term
runs on gate mass averaged across micro-batches, and the contrastive term
averages per-micro-batch losses of equal token counts. Backward therefore
sees exactly the loss a single fused batch would produce, which makes
gradient accumulation equivalent to a larger batch, not an approximation.

All randomness (batch order, router noise, view dropout, negative draws) is
keyed by (seed, purpose, step, ...), so a run can stop at any step and
resume byte-identically.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .contrastive import ContrastiveConfig, enqueue, info_nce, project_view_a, project_view_b, sample_negatives
from .data import Corpus
from .errors import ConfigError, ContractError, TrainingAbort
from .losses import LossWeights, balance_loss, lm_loss_terms, total_loss
from .model import MoeLoraModel
from .moe import routing_stats
from .seeding import derive_seed, generator
from .tensor import Tensor, mul

__all__ = [
    "TrainConfig",
    "TrainResult",
    "lr_at",
    "clip_global_norm",
    "AdamW",
    "adamw_step",
    "train",
    "evaluate_lm",
]


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    warmup_steps: int = 200
    total_steps: int = 2000
    min_lr_ratio: float = 0.1
    clip_norm: float = 1.0
    batch_size: int = 8
    grad_accum: int = 1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 100
    val_fraction: float = 0.1
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.base_lr <= 0 or self.min_lr_ratio < 0 or self.min_lr_ratio > 1:
            raise ConfigError("base_lr must be > 0 and min_lr_ratio in [0, 1]")
        if self.total_steps < 1 or self.warmup_steps < 0:
            raise ConfigError("total_steps must be >= 1 and warmup_steps >= 0")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps cannot exceed total_steps")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ConfigError("batch_size and grad_accum must be >= 1")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to base_lr * min_lr_ratio.

    Defined for integer steps 0..total_steps; training evaluates it at the
    1-based step number, so the last step lands exactly on the floor.
    """
    if step < 0 or step > cfg.total_steps:
        raise ContractError(
            f"step {step} outside [0, {cfg.total_steps}]"
        )
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    floor = cfg.base_lr * cfg.min_lr_ratio
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return floor
    progress = (step - cfg.warmup_steps) / span
    return float(floor + 0.5 * (cfg.base_lr - floor) * (1.0 + np.cos(np.pi * progress)))


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Rescale all gradients in place so their joint L2 norm is at most
    max_norm. Returns the pre-clip norm."""
    total = 0.0
    for g in grads:
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def adamw_step(params: list[Tensor], grads: list[np.ndarray], state: dict,
               lr: float, weight_decay: float, beta1: float, beta2: float,
               eps: float) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay multiplies the parameter directly (it never enters the moments),
    then bias-corrected first/second moments drive the update. `state` maps
    parameter position to its (m, v) pair and carries the shared step count.
    """
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.setdefault(i, (np.zeros_like(p.data), np.zeros_like(p.data)))
        if weight_decay != 0.0:
            p.data *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    """Optimizer wrapper owning per-parameter moment state."""

    def __init__(self, params: list[Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.state: dict = {"t": 0}

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        adamw_step(self.params, grads, self.state, lr, self.cfg.weight_decay,
                   self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps)

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i in range(len(self.params)):
            m, v = self.state[i]
            out.append((f"{i}.m", m))
            out.append((f"{i}.v", v))
        return out

    def load_state(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.state = {"t": t}
        for i, p in enumerate(self.params):
            m = arrays[f"{i}.m"].copy()
            v = arrays[f"{i}.v"].copy()
            if m.shape != p.data.shape:
                raise ConfigError(
                    f"optimizer state {i} has shape {m.shape}, "
                    f"parameter has {p.data.shape}"
                )
            self.state[i] = (m, v)


# -- data streaming -------------------------------------------------------------


def split_indices(n: int, val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic tail split: last rounded fraction is held out."""
    n_val = int(round(n * val_fraction))
    n_val = min(max(n_val, 0), n - 1)
    return np.arange(n - n_val), np.arange(n - n_val, n)


def stream_window(train_ids: np.ndarray, seed: int, start: int,
                  count: int) -> np.ndarray:
    """Sequences [start, start+count) of the infinite shuffled stream.

    The stream is the concatenation of per-epoch permutations, each keyed by
    (seed, epoch), so any window is computable without replaying history.
    """
    n = train_ids.shape[0]
    out = np.empty(count, dtype=np.int64)
    got = 0
    while got < count:
        epoch, offset = divmod(start + got, n)
        perm = generator(seed, "data-epoch", epoch).permutation(n)
        take = min(count - got, n - offset)
        out[got:got + take] = train_ids[perm[offset:offset + take]]
        got += take
    return out


# -- evaluation -------------------------------------------------------------------


def evaluate_lm(model: MoeLoraModel, corpus: Corpus, ids: np.ndarray,
                batch_size: int) -> float:
    """Masked LM loss over the given sequences, adapters on, dropout off."""
    total, count = 0.0, 0
    for lo in range(0, len(ids), batch_size):
        batch = ids[lo:lo + batch_size]
        tokens = corpus.tokens[batch]
        mask = corpus.loss_mask[batch][:, 1:]
        if not mask.any():
            continue
        res = model.lm_forward(tokens[:, :-1])
        s, c = lm_loss_terms(res.logits, tokens[:, 1:], mask)
        total += s.item()
        count += c
    if count == 0:
        raise ContractError("evaluation split has no supervised positions")
    return total / count


# -- the training loop ----------------------------------------------------------


@dataclass
class TrainResult:
    records: list[dict]
    final_step: int
    model: MoeLoraModel
    opt_state_t: int
    opt_arrays: dict[str, np.ndarray]


def train(model: MoeLoraModel, corpus: Corpus, cfg: TrainConfig,
          co_cfg: ContrastiveConfig | None = None, *,
          start_step: int = 0,
          opt_resume: tuple[int, dict[str, np.ndarray]] | None = None,
          stop_step: int | None = None,
          metrics_path=None) -> TrainResult:
    """Run steps start_step+1 .. min(total_steps, stop_step).

    Emits one metrics record per step (fixed key order, JSON lines when
    `metrics_path` is given). Resuming with the model, optimizer, and queue
    state from a checkpoint continues the exact trajectory of the
    uninterrupted run.
    """
    cfg.validate()
    co_cfg = co_cfg or ContrastiveConfig()
    co_cfg.validate()
    mcfg = model.config
    num_negatives = (
        co_cfg.num_negatives
        if co_cfg.num_negatives is not None
        else mcfg.num_experts * mcfg.queue_len
    )
    weights = cfg.loss_weights
    contrastive_on = weights.contrastive_weight != 0.0

    train_ids, val_ids = split_indices(len(corpus), cfg.val_fraction)
    if len(train_ids) == 0:
        raise ContractError("no training sequences after validation split")

    named = model.named_trainables()
    params = [t for _, t in named]
    opt = AdamW(params, cfg)
    if opt_resume is not None:
        opt.load_state(*opt_resume)

    last_step = cfg.total_steps if stop_step is None else min(stop_step, cfg.total_steps)
    records: list[dict] = []
    mode = "a" if start_step > 0 else "w"
    sink = open(metrics_path, mode, encoding="utf-8") if metrics_path else None
    try:
        for step in range(start_step + 1, last_step + 1):
            record = _train_step(model, corpus, cfg, co_cfg, weights, opt,
                                 train_ids, step, num_negatives, contrastive_on)
            if cfg.eval_every > 0 and len(val_ids) and step % cfg.eval_every == 0:
                record["eval_lm"] = evaluate_lm(model, corpus, val_ids, cfg.batch_size)
            records.append(record)
            if sink is not None:
                sink.write(json.dumps(record) + "\n")
    finally:
        if sink is not None:
            sink.close()
    return TrainResult(records=records, final_step=last_step, model=model,
                       opt_state_t=opt.state["t"],
                       opt_arrays=dict(opt.state_arrays()))


def _train_step(model: MoeLoraModel, corpus: Corpus, cfg: TrainConfig,
                co_cfg: ContrastiveConfig, weights: LossWeights, opt: AdamW,
                train_ids: np.ndarray, step: int, num_negatives: int,
                contrastive_on: bool) -> dict:
    mcfg = model.config
    num_layers = mcfg.num_layers
    seq_per_step = cfg.batch_size * cfg.grad_accum
    stream_pos = (step - 1) * seq_per_step

    # negatives are fixed per step so micro-batch splits cannot change the loss
    negatives = [
        sample_negatives(model.queues[li], num_negatives,
                         derive_seed(cfg.seed, "negatives", step, li))
        for li in range(num_layers)
    ] if contrastive_on else [None] * num_layers

    lm_sum: Tensor | None = None
    lm_count = 0
    p_bar_micro: list[list[Tensor]] = [[] for _ in range(num_layers)]
    co_terms: list[Tensor] = []
    conf_chunks: list[np.ndarray] = []
    pending_writes: list[tuple[int, np.ndarray, object]] = []

    for micro in range(cfg.grad_accum):
        ids = stream_window(train_ids, cfg.seed, stream_pos + micro * cfg.batch_size,
                            cfg.batch_size)
        tokens = corpus.tokens[ids]
        inputs, targets = tokens[:, :-1], tokens[:, 1:]
        mask = corpus.loss_mask[ids][:, 1:]
        noise_seed = (
            derive_seed(cfg.seed, "router-noise", step, micro)
            if mcfg.router_noise_std > 0.0 else None
        )
        res = model.lm_forward(inputs, noise_seed=noise_seed, collect=True)
        part, count = lm_loss_terms(res.logits, targets, mask)
        lm_sum = part if lm_sum is None else lm_sum + part
        lm_count += count

        for li, cap in enumerate(res.layers):
            p_bar_micro[li].append(routing_stats(cap.router_out))
            conf_chunks.append(cap.router_out.gates.data.max(axis=-1).reshape(-1))
            if contrastive_on:
                layer = model.layers[li]
                d_h = mcfg.proj_dim
                za = project_view_a(
                    layer.head_a, cap.h_route,
                    derive_seed(cfg.seed, "view-a", step, micro, li), train=True)
                zb = project_view_b(
                    layer.head_b, cap.h_route, cap.h_shared, co_cfg.fusion_weight,
                    derive_seed(cfg.seed, "view-b", step, micro, li), train=True)
                za2 = za.reshape(-1, d_h)
                zb2 = zb.reshape(-1, d_h)
                co_terms.append(info_nce(za2, zb2, negatives[li],
                                         co_cfg.temperature, co_cfg.normalize))
                pending_writes.append((li, zb2.data.copy(), cap.router_out))

    lm = mul(lm_sum, Tensor(1.0 / lm_count))
    p_bars = [_mean_tensors(parts) for parts in p_bar_micro]
    balance = _mean_tensors([balance_loss(p) for p in p_bars])
    contrastive = _mean_tensors(co_terms) if co_terms else Tensor(0.0)
    total, breakdown = total_loss(lm, balance, contrastive, weights)

    for p in opt.params:
        p.zero_grad()
    total.backward()
    grads = [p.grad for p in opt.params]
    for (name, _), g in zip(model.named_trainables(), grads):
        if not np.all(np.isfinite(g)):
            raise TrainingAbort(f"grad:{name}", float("nan"))
    clip_global_norm(grads, cfg.clip_norm)
    opt.step(grads, lr_at(step, cfg))

    # queue writes land only after the update, in micro-batch order
    for li, zb_data, router_out in pending_writes:
        enqueue(model.queues[li], zb_data, router_out)

    return {
        "step": step,
        "lm": breakdown.lm,
        "balance": breakdown.balance,
        "contrastive": breakdown.contrastive,
        "total": breakdown.total,
        "lr": lr_at(step, cfg),
        "conf_mean": float(np.concatenate(conf_chunks).mean()),
        "p_bar": [[float(x) for x in p.data] for p in p_bars],
    }


def _mean_tensors(parts: list[Tensor]) -> Tensor:
    acc = parts[0]
    for t in parts[1:]:
        acc = acc + t
    return mul(acc, Tensor(1.0 / len(parts)))
