"""Synthetic multi-task token corpus.

Each task owns a disjoint block of the vocabulary and a first-order Markov
chain over its block, so task identity is decodable from any window of a
sequence. Two sequence kinds share one fixed length:

  * language-modeling sequences: a chain walk, every next-token supervised
  * probe sequences: a chain walk, then a question marker, four answer
    options (one from the context's task block, three from other blocks),
    an answer marker, and the correct option; only the final answer token
    is supervised

A probe scores 1/4 under random guessing, which anchors the evaluation
floor. All randomness is counter-seeded; the same spec and seed give a
byte-identical corpus.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, InputError
from .seeding import generator

_OPTIONS = 4  # options per probe; fixed by the probe format


@dataclass
class SyntheticCorpusSpec:
    num_tasks: int = 4
    vocab_size: int = 256
    block_size: int = 32        # vocabulary tokens owned by each task
    seq_len: int = 32
    num_sequences: int = 512
    probe_fraction: float = 0.25
    successors_per_token: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.num_tasks < 1:
            raise ConfigError("num_tasks must be >= 1")
        if self.seq_len < 9:
            # probes need room for context + marker + options + marker + answer
            raise ConfigError(f"seq_len must be >= 9, got {self.seq_len}")
        if not 0.0 <= self.probe_fraction <= 1.0:
            raise ConfigError("probe_fraction must lie in [0, 1]")
        if not 1 <= self.successors_per_token <= self.block_size:
            raise ConfigError("successors_per_token must lie in [1, block_size]")
        spare = self.vocab_size - self.num_tasks * self.block_size - 2
        if spare < 0:
            raise ConfigError(
                f"vocab_size {self.vocab_size} too small for {self.num_tasks} "
                f"blocks of {self.block_size} plus 2 marker tokens"
            )
        if self.num_tasks < 2 and spare < _OPTIONS - 1:
            raise ConfigError("probes need at least 3 distractor tokens outside the block")

    # token id layout: task blocks first, then free space, markers at the top
    def block_range(self, task: int) -> tuple[int, int]:
        return task * self.block_size, (task + 1) * self.block_size

    @property
    def question_token(self) -> int:
        return self.vocab_size - 2

    @property
    def answer_token(self) -> int:
        return self.vocab_size - 1


@dataclass
class Corpus:
    """Fixed-length token sequences with supervision masks and probe metadata.

    loss_mask[i, t] marks token t of sequence i as a supervised target when
    it appears as the next-token label. probe_answer_pos is the index of the
    answer token (-1 for plain sequences); probe_options holds the four
    candidate ids (-1 padding for plain sequences).
    """

    tokens: np.ndarray            # [N, L] int64
    loss_mask: np.ndarray         # [N, L] bool
    task_id: np.ndarray           # [N] int64
    is_probe: np.ndarray          # [N] bool
    probe_options: np.ndarray     # [N, 4] int64
    probe_answer_pos: np.ndarray  # [N] int64
    spec: SyntheticCorpusSpec

    def __len__(self) -> int:
        return self.tokens.shape[0]


def build_transition_tables(spec: SyntheticCorpusSpec) -> list[np.ndarray]:
    """Per-task row-stochastic matrices over each task's block.

    Each row concentrates on a few successors with Dirichlet weights, which
    keeps next-token entropy low enough for a small model to reduce.
    """
    tables = []
    for task in range(spec.num_tasks):
        rng = generator(spec.seed, "transitions", task)
        table = np.zeros((spec.block_size, spec.block_size))
        for row in range(spec.block_size):
            succ = rng.choice(spec.block_size, size=spec.successors_per_token,
                              replace=False)
            weights = rng.dirichlet(np.ones(spec.successors_per_token))
            table[row, succ] = weights
        tables.append(table)
    return tables


def _chain_walk(table: np.ndarray, start: int, length: int,
                rng: np.random.Generator) -> np.ndarray:
    walk = np.empty(length, dtype=np.int64)
    state = start
    for i in range(length):
        walk[i] = state
        state = rng.choice(table.shape[0], p=table[state])
    return walk


def generate_synthetic_corpus(spec: SyntheticCorpusSpec) -> Corpus:
    spec.validate()
    tables = build_transition_tables(spec)
    n, length = spec.num_sequences, spec.seq_len

    tokens = np.zeros((n, length), dtype=np.int64)
    loss_mask = np.zeros((n, length), dtype=bool)
    task_id = np.zeros(n, dtype=np.int64)
    probe_options = np.full((n, _OPTIONS), -1, dtype=np.int64)
    probe_answer_pos = np.full(n, -1, dtype=np.int64)

    num_probes = int(round(spec.probe_fraction * n))
    order = generator(spec.seed, "probe-assign").permutation(n)
    is_probe = np.zeros(n, dtype=bool)
    is_probe[order[:num_probes]] = True

    for i in range(n):
        rng = generator(spec.seed, "sequence", i)
        task = int(rng.integers(spec.num_tasks))
        task_id[i] = task
        lo, _hi = spec.block_range(task)
        start = int(rng.integers(spec.block_size))
        if not is_probe[i]:
            walk = _chain_walk(tables[task], start, length, rng)
            tokens[i] = lo + walk
            loss_mask[i, 1:] = True  # every transition is supervised
            continue

        ctx_len = length - (_OPTIONS + 3)
        walk = _chain_walk(tables[task], start, ctx_len, rng)
        correct = lo + int(rng.integers(spec.block_size))
        distractors = _draw_distractors(spec, task, rng)
        options = np.array([correct] + distractors, dtype=np.int64)
        rng.shuffle(options)

        seq = np.concatenate([
            lo + walk,
            [spec.question_token],
            options,
            [spec.answer_token],
            [correct],
        ])
        tokens[i] = seq
        loss_mask[i, length - 1] = True  # only the answer is supervised
        probe_options[i] = options
        probe_answer_pos[i] = length - 1

    return Corpus(tokens=tokens, loss_mask=loss_mask, task_id=task_id,
                  is_probe=is_probe, probe_options=probe_options,
                  probe_answer_pos=probe_answer_pos, spec=spec)


def _draw_distractors(spec: SyntheticCorpusSpec, task: int,
                      rng: np.random.Generator) -> list[int]:
    """Three tokens from outside the context task's block, no duplicates."""
    pool: list[int] = []
    for other in range(spec.num_tasks):
        if other == task:
            continue
        lo, hi = spec.block_range(other)
        pool.extend(range(lo, hi))
    lo_free = spec.num_tasks * spec.block_size
    pool.extend(range(lo_free, spec.question_token))
    picks = rng.choice(len(pool), size=_OPTIONS - 1, replace=False)
    return [pool[int(p)] for p in picks]


# -- serialization -------------------------------------------------------------


def save_corpus(corpus: Corpus, path) -> None:
    np.savez(
        path,
        tokens=corpus.tokens,
        loss_mask=corpus.loss_mask,
        task_id=corpus.task_id,
        is_probe=corpus.is_probe,
        probe_options=corpus.probe_options,
        probe_answer_pos=corpus.probe_answer_pos,
        spec_json=np.frombuffer(
            json.dumps(asdict(corpus.spec)).encode("utf-8"), dtype=np.uint8
        ),
    )


def load_corpus(path) -> Corpus:
    try:
        with np.load(path, allow_pickle=False) as z:
            spec = SyntheticCorpusSpec(
                **json.loads(bytes(z["spec_json"].tobytes()).decode("utf-8"))
            )
            return Corpus(
                tokens=z["tokens"],
                loss_mask=z["loss_mask"],
                task_id=z["task_id"],
                is_probe=z["is_probe"],
                probe_options=z["probe_options"],
                probe_answer_pos=z["probe_answer_pos"],
                spec=spec,
            )
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as e:
        raise InputError(f"cannot load corpus from {path}: {e}") from e
