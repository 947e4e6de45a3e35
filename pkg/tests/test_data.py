"""Synthetic corpus: block structure, chain statistics, probe format."""

import numpy as np
import pytest

from moelab.data import (
    SyntheticCorpusSpec,
    build_transition_tables,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
)
from moelab.errors import ConfigError, InputError


def small_spec(**kw):
    base = dict(num_tasks=4, vocab_size=256, block_size=16, seq_len=24,
                num_sequences=80, probe_fraction=0.25, seed=5)
    base.update(kw)
    return SyntheticCorpusSpec(**base)


def test_transition_tables_are_row_stochastic_and_sparse():
    spec = small_spec()
    for table in build_transition_tables(spec):
        assert table.shape == (spec.block_size, spec.block_size)
        assert np.all(table >= 0.0)
        assert np.max(np.abs(table.sum(axis=1) - 1.0)) < 1e-12
        assert np.all((table > 0).sum(axis=1) == spec.successors_per_token)


def test_task_blocks_disjoint_and_respected():
    spec = small_spec()
    corpus = generate_synthetic_corpus(spec)
    ranges = [spec.block_range(t) for t in range(spec.num_tasks)]
    for (a0, a1), (b0, b1) in zip(ranges, ranges[1:]):
        assert a1 <= b0  # consecutive blocks cannot overlap
    assert spec.question_token >= ranges[-1][1]
    for i in range(len(corpus)):
        lo, hi = spec.block_range(int(corpus.task_id[i]))
        if corpus.is_probe[i]:
            ctx = corpus.tokens[i, : spec.seq_len - 7]
            assert np.all((ctx >= lo) & (ctx < hi))
        else:
            assert np.all((corpus.tokens[i] >= lo) & (corpus.tokens[i] < hi))


def test_bigram_statistics_match_transition_table():
    # one long walk; empirical next-token rows vs the table, count-weighted TV
    spec = small_spec(num_tasks=1, block_size=16, seq_len=16,
                      num_sequences=1, probe_fraction=0.0)
    table = build_transition_tables(spec)[0]
    from moelab.data import _chain_walk
    from moelab.seeding import generator
    walk = _chain_walk(table, 0, 100_000, generator(spec.seed, "tv-test"))
    counts = np.zeros_like(table)
    np.add.at(counts, (walk[:-1], walk[1:]), 1.0)
    row_n = counts.sum(axis=1)
    tv_weighted = 0.0
    for r in range(table.shape[0]):
        if row_n[r] == 0:
            continue
        emp = counts[r] / row_n[r]
        tv = 0.5 * np.abs(emp - table[r]).sum()
        tv_weighted += tv * (row_n[r] / row_n.sum())
    assert tv_weighted < 0.02


def test_probe_layout_and_masking():
    spec = small_spec()
    corpus = generate_synthetic_corpus(spec)
    L = spec.seq_len
    probes = np.flatnonzero(corpus.is_probe)
    assert probes.size == round(spec.probe_fraction * spec.num_sequences)
    for i in probes:
        seq = corpus.tokens[i]
        assert seq[L - 7] == spec.question_token
        assert seq[L - 2] == spec.answer_token
        options = corpus.probe_options[i]
        assert np.array_equal(np.sort(seq[L - 6:L - 2]), np.sort(options))
        assert len(set(options.tolist())) == 4
        answer = seq[L - 1]
        assert answer in options
        lo, hi = spec.block_range(int(corpus.task_id[i]))
        assert lo <= answer < hi
        outside = [o for o in options if not (lo <= o < hi)]
        assert len(outside) == 3
        assert corpus.probe_answer_pos[i] == L - 1
        mask = corpus.loss_mask[i]
        assert mask[L - 1] and mask.sum() == 1
    for i in np.flatnonzero(~corpus.is_probe):
        mask = corpus.loss_mask[i]
        assert not mask[0] and np.all(mask[1:])
        assert corpus.probe_answer_pos[i] == -1


def test_corpus_deterministic_and_seed_sensitive():
    a = generate_synthetic_corpus(small_spec())
    b = generate_synthetic_corpus(small_spec())
    c = generate_synthetic_corpus(small_spec(seed=6))
    assert np.array_equal(a.tokens, b.tokens)
    assert np.array_equal(a.loss_mask, b.loss_mask)
    assert np.array_equal(a.task_id, b.task_id)
    assert not np.array_equal(a.tokens, c.tokens)


def test_corpus_round_trip(tmp_path):
    corpus = generate_synthetic_corpus(small_spec())
    path = tmp_path / "corpus.npz"
    save_corpus(corpus, path)
    loaded = load_corpus(path)
    for field in ("tokens", "loss_mask", "task_id", "is_probe",
                  "probe_options", "probe_answer_pos"):
        assert np.array_equal(getattr(corpus, field), getattr(loaded, field))
    assert loaded.spec == corpus.spec
    with pytest.raises(InputError):
        load_corpus(tmp_path / "missing.npz")


def test_spec_validation():
    with pytest.raises(ConfigError):
        small_spec(seq_len=8).validate()
    with pytest.raises(ConfigError):
        small_spec(vocab_size=60, block_size=16, num_tasks=4).validate()
    with pytest.raises(ConfigError):
        small_spec(probe_fraction=1.5).validate()
    with pytest.raises(ConfigError):
        small_spec(successors_per_token=99).validate()
