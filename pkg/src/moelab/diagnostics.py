"""Routing and evaluation diagnostics.

Routing confidence is the mean, over tokens, of each token's largest gate
value after top-k renormalization. With k of n experts active the floor is
1/k (uniform gates over the selected set), so absolute values from models
with different k are not comparable; trends within one configuration are.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import Corpus
from .errors import ContractError, InputError
from .model import MoeLoraModel
from .moe import RouterOutput

__all__ = [
    "ConfidenceReport",
    "routing_confidence",
    "BenchmarkScore",
    "weighted_average",
    "McEvalResult",
    "toy_mc_eval",
    "collect_expert_assignments",
    "normalized_mutual_information",
    "tail_mean",
]


@dataclass
class ConfidenceReport:
    global_conf: float
    per_layer_conf: list[float]
    per_layer_tokens: list[int]
    token_count: int  # total (token, layer) observations


def routing_confidence(records: Iterable[tuple[int, RouterOutput]]) -> ConfidenceReport:
    """Aggregate max-gate confidence from (layer, routing decision) pairs.

    The global value is the token-count-weighted mean of the per-layer
    means, i.e. the plain mean over every observation.
    """
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for layer, rout in records:
        m = rout.gates.data.max(axis=-1).reshape(-1)
        sums[layer] = sums.get(layer, 0.0) + float(m.sum())
        counts[layer] = counts.get(layer, 0) + m.size
    if not counts:
        raise ContractError("no routing records supplied")
    layers = sorted(counts)
    per_layer = [sums[l] / counts[l] for l in layers]
    total = sum(counts.values())
    return ConfidenceReport(
        global_conf=sum(sums[l] for l in layers) / total,
        per_layer_conf=per_layer,
        per_layer_tokens=[counts[l] for l in layers],
        token_count=total,
    )


# -- benchmark score pooling -----------------------------------------------------


@dataclass
class BenchmarkScore:
    name: str
    count: int
    accuracy: float

    def validate(self) -> None:
        if self.count <= 0:
            raise InputError(f"{self.name}: count must be positive, got {self.count}")
        if not 0.0 <= self.accuracy <= 100.0:
            raise InputError(
                f"{self.name}: accuracy must lie in [0, 100], got {self.accuracy}"
            )


def weighted_average(scores: Sequence[BenchmarkScore]) -> float:
    """Item-count-weighted mean accuracy across benchmark subsets."""
    if not scores:
        raise InputError("no scores to aggregate")
    for s in scores:
        s.validate()
    total = sum(s.count for s in scores)
    return sum(s.count * s.accuracy for s in scores) / total


# -- probe evaluation --------------------------------------------------------------


@dataclass
class McEvalResult:
    accuracy: float
    num_scored: int
    num_skipped: int


def toy_mc_eval(model: MoeLoraModel, corpus: Corpus,
                batch_size: int = 16) -> McEvalResult:
    """Score multiple-choice probes by constrained greedy decoding.

    The prediction is the argmax over the four option tokens' logits at the
    answer position (ties resolve to the lowest token id). Malformed probes
    (missing options, bad positions, out-of-range ids) are skipped and
    counted, never scored.
    """
    idx = np.flatnonzero(corpus.is_probe)
    vocab = model.config.vocab_size
    seq_len = corpus.tokens.shape[1]
    valid: list[int] = []
    skipped = 0
    for i in idx:
        pos = int(corpus.probe_answer_pos[i])
        opts = corpus.probe_options[i]
        ok = (
            1 <= pos < seq_len
            and np.all(opts >= 0) and np.all(opts < vocab)
            and len(set(opts.tolist())) == opts.shape[0]
            and corpus.tokens[i, pos] in opts
            and np.all(corpus.tokens[i] >= 0) and np.all(corpus.tokens[i] < vocab)
        )
        if ok:
            valid.append(int(i))
        else:
            skipped += 1
    if not valid:
        return McEvalResult(accuracy=0.0, num_scored=0, num_skipped=skipped)

    hits = 0
    for lo in range(0, len(valid), batch_size):
        batch = valid[lo:lo + batch_size]
        # answer positions are uniform per corpus layout; group anyway by pos
        for i in batch:
            pos = int(corpus.probe_answer_pos[i])
            context = corpus.tokens[i:i + 1, :pos]
            logits = model.lm_forward(context).logits.data[0, -1]
            opts = corpus.probe_options[i]
            order = np.argsort(opts)  # low id first so argmax ties stay deterministic
            scores = logits[opts[order]]
            pred = int(opts[order][int(np.argmax(scores))])
            hits += int(pred == corpus.tokens[i, pos])
    return McEvalResult(accuracy=hits / len(valid), num_scored=len(valid),
                        num_skipped=skipped)


# -- expert specialization ----------------------------------------------------------


def collect_expert_assignments(model: MoeLoraModel, corpus: Corpus,
                               ids: np.ndarray | None = None,
                               batch_size: int = 16,
                               layer: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Per-token (argmax expert, task label) pairs from one layer's router."""
    if ids is None:
        ids = np.arange(len(corpus))
    layer = layer % model.config.num_layers
    experts: list[np.ndarray] = []
    tasks: list[np.ndarray] = []
    for lo in range(0, len(ids), batch_size):
        batch = np.asarray(ids[lo:lo + batch_size])
        tokens = corpus.tokens[batch][:, :-1]
        res = model.lm_forward(tokens, collect=True)
        gates = res.layers[layer].router_out.gates.data
        experts.append(np.argmax(gates, axis=-1).reshape(-1))
        tasks.append(np.repeat(corpus.task_id[batch], tokens.shape[1]))
    return np.concatenate(experts), np.concatenate(tasks)


def normalized_mutual_information(x: np.ndarray, y: np.ndarray) -> float:
    """2 I(X;Y) / (H(X) + H(Y)) from empirical counts; 0 if either is constant."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError(f"label arrays must be equal-length vectors, "
                         f"got {x.shape} and {y.shape}")
    if x.size == 0:
        raise InputError("empty label arrays")
    n = x.size
    xv, xi = np.unique(x, return_inverse=True)
    yv, yi = np.unique(y, return_inverse=True)
    joint = np.zeros((xv.size, yv.size))
    np.add.at(joint, (xi, yi), 1.0)
    joint /= n
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    hx = -np.sum(px[px > 0] * np.log(px[px > 0]))
    hy = -np.sum(py[py > 0] * np.log(py[py > 0]))
    if hx == 0.0 or hy == 0.0:
        return 0.0
    nz = joint > 0
    mi = float(np.sum(joint[nz] * (np.log(joint[nz])
                                   - np.log(px[:, None] * py[None, :])[nz])))
    return float(2.0 * mi / (hx + hy))


def tail_mean(values: Sequence[float], fraction: float = 0.1) -> float:
    """Mean of the trailing fraction (at least one element)."""
    if not values:
        raise ContractError("no values")
    k = max(1, int(round(len(values) * fraction)))
    return float(np.mean(list(values)[-k:]))
