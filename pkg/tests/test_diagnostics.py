"""Routing confidence, probe scoring, specialization metrics, score pooling."""

import numpy as np
import pytest
from sklearn.metrics import normalized_mutual_info_score

from moelab.data import SyntheticCorpusSpec, generate_synthetic_corpus
from moelab.diagnostics import (
    BenchmarkScore,
    collect_expert_assignments,
    normalized_mutual_information,
    routing_confidence,
    tail_mean,
    toy_mc_eval,
    weighted_average,
)
from moelab.errors import ContractError, InputError
from moelab.model import ModelConfig, MoeLoraModel
from moelab.moe import RouterOutput
from moelab.seeding import generator
from moelab.tensor import Tensor


def fake_routing(gates: np.ndarray) -> RouterOutput:
    sel = np.argsort(-gates, axis=-1)[..., :2].astype(np.int64)
    return RouterOutput(gates=Tensor(gates), selected=sel, logits=Tensor(gates))


# -- routing confidence -----------------------------------------------------------


def test_confidence_one_hot_is_one():
    gates = np.zeros((3, 5, 4))
    gates[..., 2] = 1.0
    rep = routing_confidence([(0, fake_routing(gates))])
    assert rep.global_conf == 1.0
    assert rep.per_layer_conf == [1.0]
    assert rep.token_count == 15


def test_confidence_uniform_is_reciprocal():
    gates = np.full((2, 4), 0.25)
    rep = routing_confidence([(0, fake_routing(gates))])
    assert abs(rep.global_conf - 0.25) < 1e-15


def test_confidence_global_is_count_weighted_mean():
    rng = generator("test-diag", "conf")

    def softmax(z):
        e = np.exp(z - z.max(-1, keepdims=True))
        return e / e.sum(-1, keepdims=True)

    g0 = softmax(rng.normal(0, 1, (7, 4)))
    g1 = softmax(rng.normal(0, 1, (13, 4)))
    rep = routing_confidence([(0, fake_routing(g0)), (1, fake_routing(g1))])
    assert rep.per_layer_tokens == [7, 13]
    expect_layers = [g0.max(-1).mean(), g1.max(-1).mean()]
    assert np.allclose(rep.per_layer_conf, expect_layers, atol=1e-15)
    pooled = (g0.max(-1).sum() + g1.max(-1).sum()) / 20
    assert abs(rep.global_conf - pooled) < 1e-12
    # interleaved chunks of the same layer accumulate, not overwrite
    rep2 = routing_confidence([(0, fake_routing(g0[:3])), (1, fake_routing(g1)),
                               (0, fake_routing(g0[3:]))])
    assert abs(rep2.global_conf - pooled) < 1e-12


def test_confidence_empty_rejected():
    with pytest.raises(ContractError):
        routing_confidence([])


def test_confidence_at_least_reciprocal_top_k_on_model():
    cfg = ModelConfig(vocab_size=64, hidden_dim=16, num_layers=2, num_heads=2,
                      mlp_inner_dim=24, max_seq_len=16, num_experts=4, top_k=2,
                      attn_lora_rank=2, expert_rank=2, proj_dim=8, seed=0)
    model = MoeLoraModel(cfg)
    tokens = generator("test-diag", "tokens").integers(0, 64, (4, 12))
    out = model.lm_forward(tokens, collect=True)
    records = [(li, cap.router_out) for li, cap in enumerate(out.layers)]
    rep = routing_confidence(records)
    assert rep.global_conf >= 1 / cfg.top_k - 1e-12
    assert rep.global_conf <= 1.0 + 1e-12
    assert rep.token_count == 4 * 12 * cfg.num_layers


# -- benchmark score pooling -----------------------------------------------------


def test_weighted_average_hand_case():
    scores = [BenchmarkScore("a", 3, 10.0), BenchmarkScore("b", 1, 50.0)]
    assert abs(weighted_average(scores) - 20.0) < 1e-12


def test_benchmark_score_validation():
    with pytest.raises(InputError):
        BenchmarkScore("x", 0, 10.0).validate()
    with pytest.raises(InputError):
        BenchmarkScore("x", 5, -1.0).validate()
    with pytest.raises(InputError):
        BenchmarkScore("x", 5, 100.5).validate()
    with pytest.raises(InputError):
        weighted_average([])


# -- multiple-choice probe scoring ----------------------------------------------


def test_untrained_probe_accuracy_near_chance():
    spec = SyntheticCorpusSpec(num_tasks=4, vocab_size=96, block_size=16,
                               seq_len=20, num_sequences=512,
                               probe_fraction=0.8, seed=11)
    corpus = generate_synthetic_corpus(spec)
    cfg = ModelConfig(vocab_size=96, hidden_dim=16, num_layers=2, num_heads=2,
                      mlp_inner_dim=24, max_seq_len=24, num_experts=4, top_k=2,
                      attn_lora_rank=2, expert_rank=2, proj_dim=8, seed=2)
    model = MoeLoraModel(cfg)
    res = toy_mc_eval(model, corpus)
    assert res.num_scored == int(corpus.is_probe.sum()) == 410
    assert res.num_skipped == 0
    # 4 options, untrained 410-probe sample: chance 0.25 within a wide band
    assert 0.15 <= res.accuracy <= 0.35


def test_malformed_probes_skipped_not_scored():
    spec = SyntheticCorpusSpec(num_tasks=2, vocab_size=96, block_size=16,
                               seq_len=20, num_sequences=40,
                               probe_fraction=0.5, seed=3)
    corpus = generate_synthetic_corpus(spec)
    probe_ids = np.flatnonzero(corpus.is_probe)
    corpus.probe_options[probe_ids[0]][0] = 96      # out of vocabulary
    corpus.probe_answer_pos[probe_ids[1]] = 0       # no context before answer
    corpus.probe_options[probe_ids[2]][:] = 7       # duplicate options
    corpus.tokens[probe_ids[3], corpus.probe_answer_pos[probe_ids[3]]] = 95
    cfg = ModelConfig(vocab_size=96, hidden_dim=16, num_layers=1, num_heads=2,
                      mlp_inner_dim=24, max_seq_len=24, num_experts=4, top_k=2,
                      attn_lora_rank=2, expert_rank=2, proj_dim=8, seed=2)
    res = toy_mc_eval(MoeLoraModel(cfg), corpus)
    assert res.num_skipped == 4
    assert res.num_scored == len(probe_ids) - 4


def test_probe_scoring_deterministic():
    spec = SyntheticCorpusSpec(num_tasks=2, vocab_size=96, block_size=16,
                               seq_len=20, num_sequences=64,
                               probe_fraction=0.5, seed=7)
    corpus = generate_synthetic_corpus(spec)
    cfg = ModelConfig(vocab_size=96, hidden_dim=16, num_layers=1, num_heads=2,
                      mlp_inner_dim=24, max_seq_len=24, num_experts=4, top_k=2,
                      attn_lora_rank=2, expert_rank=2, proj_dim=8, seed=2)
    model = MoeLoraModel(cfg)
    a = toy_mc_eval(model, corpus, batch_size=16)
    b = toy_mc_eval(model, corpus, batch_size=5)
    assert (a.accuracy, a.num_scored, a.num_skipped) == \
        (b.accuracy, b.num_scored, b.num_skipped)


# -- expert/task alignment --------------------------------------------------------


def test_nmi_perfect_and_degenerate_cases():
    x = np.array([0, 0, 1, 1, 2, 2])
    assert abs(normalized_mutual_information(x, x) - 1.0) < 1e-12
    relabeled = np.array([5, 5, 3, 3, 9, 9])
    assert abs(normalized_mutual_information(x, relabeled) - 1.0) < 1e-12
    const = np.zeros(6, dtype=int)
    assert normalized_mutual_information(x, const) == 0.0
    assert normalized_mutual_information(const, x) == 0.0


def test_nmi_independent_labels_near_zero():
    rng = generator("test-diag", "nmi")
    x = rng.integers(0, 4, 20000)
    y = rng.integers(0, 4, 20000)
    assert normalized_mutual_information(x, y) < 0.01


def test_nmi_matches_reference_implementation():
    rng = generator("test-diag", "nmi-oracle")
    for trial in range(20):
        n = int(rng.integers(10, 400))
        x = rng.integers(0, int(rng.integers(2, 6)), n)
        y = (x + rng.integers(0, 3, n)) % 5  # partially dependent labels
        ours = normalized_mutual_information(x, y)
        ref = normalized_mutual_info_score(x, y, average_method="arithmetic")
        assert abs(ours - ref) < 1e-9, trial


def test_nmi_input_validation():
    with pytest.raises(InputError):
        normalized_mutual_information(np.array([1, 2]), np.array([1]))
    with pytest.raises(InputError):
        normalized_mutual_information(np.array([]), np.array([]))
    with pytest.raises(InputError):
        normalized_mutual_information(np.ones((2, 2)), np.ones((2, 2)))


def test_collect_expert_assignments_shapes():
    spec = SyntheticCorpusSpec(num_tasks=3, vocab_size=96, block_size=16,
                               seq_len=20, num_sequences=24,
                               probe_fraction=0.0, seed=5)
    corpus = generate_synthetic_corpus(spec)
    cfg = ModelConfig(vocab_size=96, hidden_dim=16, num_layers=2, num_heads=2,
                      mlp_inner_dim=24, max_seq_len=24, num_experts=4, top_k=2,
                      attn_lora_rank=2, expert_rank=2, proj_dim=8, seed=2)
    model = MoeLoraModel(cfg)
    experts, tasks = collect_expert_assignments(model, corpus, batch_size=7)
    n_tokens = 24 * 19  # every input position of every sequence
    assert experts.shape == tasks.shape == (n_tokens,)
    assert np.all((experts >= 0) & (experts < 4))
    assert set(np.unique(tasks)) <= {0, 1, 2}
    again, _ = collect_expert_assignments(model, corpus, batch_size=16)
    assert np.array_equal(experts, again)


# -- series summarization ---------------------------------------------------------


def test_tail_mean():
    vals = list(range(1, 101))
    assert abs(tail_mean(vals, 0.1) - np.mean(vals[90:])) < 1e-12
    assert tail_mean([7.0], 0.1) == 7.0
    assert abs(tail_mean([1.0, 2.0, 3.0, 4.0], 0.5) - 3.5) < 1e-15
    with pytest.raises(ContractError):
        tail_mean([], 0.1)
