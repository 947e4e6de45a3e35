"""Training objectives: masked language modeling, load balance, and the sum.

All three terms are scalar graph tensors so one backward pass covers the
joint objective. Any non-finite term aborts with the offending name rather
than poisoning the optimizer state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError, TrainingAbort
from .tensor import Tensor, clamp_min, exp, log, mul, tensor_sum

# Balance-loss probabilities are floored here before the log; mean gate mass
# for an expert that never fires is exactly 0 and must not reach log().
_P_FLOOR = 1e-9


@dataclass
class LossWeights:
    balance_weight: float = 0.01
    contrastive_weight: float = 0.01


@dataclass
class LossBreakdown:
    """Scalar values of one objective evaluation, for logging."""

    lm: float
    balance: float
    contrastive: float
    total: float


def log_softmax_last_dim(x: Tensor) -> Tensor:
    """x - logsumexp(x, last). The max shift is detached; for any constant
    shift the expression equals the exact log-softmax, value and gradient."""
    m = Tensor(x.data.max(axis=-1, keepdims=True))
    shifted = x - m
    lse = log(tensor_sum(exp(shifted), axis=-1, keepdims=True))
    return shifted - lse


def lm_loss_terms(logits: Tensor, targets: np.ndarray,
                  mask: np.ndarray) -> tuple[Tensor, int]:
    """Sum of masked negative target log-probs, plus the masked count.

    Keeping sum and count separate lets callers pool several batches into
    one mean over the union of their masked positions.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ShapeError(
            f"logits {logits.shape}, targets {targets.shape}, mask {mask.shape} disagree"
        )
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ContractError(f"target id outside [0, {vocab})")
    count = int(np.count_nonzero(mask))
    if count == 0:
        raise ContractError("loss mask selects no positions")
    logp = log_softmax_last_dim(logits)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    onehot *= np.asarray(mask, dtype=np.float64)[..., None]
    picked = tensor_sum(mul(logp, Tensor(onehot)))
    return mul(picked, Tensor(-1.0)), count


def lm_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over masked positions only."""
    total, count = lm_loss_terms(logits, targets, mask)
    return mul(total, Tensor(1.0 / count))


def balance_loss(p_bar: Tensor) -> Tensor:
    """KL(uniform || mean gate mass) = sum_i (1/n) log((1/n) / p_bar_i).

    Zero exactly when usage is uniform. `p_bar` must be a distribution:
    nonnegative entries summing to 1.
    """
    if p_bar.ndim != 1:
        raise ContractError(f"p_bar must be a vector, got shape {p_bar.shape}")
    if np.any(p_bar.data < -1e-9) or abs(float(p_bar.data.sum()) - 1.0) > 1e-6:
        raise ContractError(
            f"p_bar is not a distribution (sum {float(p_bar.data.sum()):.6g})"
        )
    n = p_bar.shape[0]
    u = 1.0 / n
    terms = log(clamp_min(p_bar, _P_FLOOR)) * (-u)
    return tensor_sum(terms) + Tensor(n * u * np.log(u))


def total_loss(lm: Tensor, balance: Tensor, contrastive: Tensor,
               weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum, plus a float snapshot of all terms.

    Aborts with the term's name if any component is non-finite.
    """
    parts = {"lm": lm, "balance": balance, "contrastive": contrastive}
    for name, t in parts.items():
        v = t.item()
        if not np.isfinite(v):
            raise TrainingAbort(name, v)
    total = lm + balance * weights.balance_weight + contrastive * weights.contrastive_weight
    breakdown = LossBreakdown(
        lm=lm.item(),
        balance=balance.item(),
        contrastive=contrastive.item(),
        total=total.item(),
    )
    return total, breakdown
