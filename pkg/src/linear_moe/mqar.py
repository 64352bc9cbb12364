"""Multi-query associative recall (MQAR) task generator.

A sample lists ``num_pairs`` key/value bindings, then ``query_count`` queries.
Each query is a bound key followed by its value, so a causal model must
predict the value from the position of the query key::

    k1 v1 k2 v2 ... kP vP | q1 a1 q2 a2 ...

Keys come from the lower half of the vocabulary and values from the upper
half. Labels are ``-1`` everywhere except at query-key positions, where they
hold the bound value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import IGNORE_INDEX, PackedBatch, pack_sequences
from .tensor import Rng

FORMAT = "linear-moe-mqar/1"


@dataclass(frozen=True)
class MqarDataset:
    seed: int
    num_pairs: int
    vocab: int
    query_count: int
    tokens: np.ndarray  # (samples, length) int64
    labels: np.ndarray  # same shape; IGNORE_INDEX off the query keys

    @property
    def num_samples(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    def batch(self, rows=None) -> PackedBatch:
        rows = np.arange(self.num_samples) if rows is None else np.asarray(rows)
        return pack_sequences(list(self.tokens[rows]), list(self.labels[rows]))

    def save(self, path) -> Path:
        """JSON lines: a header record, then one ``{"tokens", "labels"}`` record per sample."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        head = {"format": FORMAT, "seed": self.seed, "num_pairs": self.num_pairs, "vocab": self.vocab,
                "query_count": self.query_count}
        lines = [json.dumps(head)]
        lines += [json.dumps({"tokens": t.tolist(), "labels": l.tolist()}) for t, l in zip(self.tokens, self.labels)]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "MqarDataset":
        lines = Path(path).read_text().splitlines()
        head = json.loads(lines[0])
        if head.get("format") != FORMAT:
            raise ValueError(f"{path}: not an MQAR dataset")
        rows = [json.loads(line) for line in lines[1:] if line.strip()]
        return cls(head["seed"], head["num_pairs"], head["vocab"], head["query_count"],
                   np.array([r["tokens"] for r in rows], dtype=np.int64),
                   np.array([r["labels"] for r in rows], dtype=np.int64))


def check_feasible(num_pairs: int, vocab: int, query_count: int) -> None:
    if num_pairs < 1 or query_count < 1:
        raise ConfigError("MQAR needs at least one pair and one query")
    if vocab // 2 < num_pairs:
        raise ConfigError(f"vocab {vocab} cannot hold {num_pairs} distinct keys (need vocab >= {2 * num_pairs})")


def gen_mqar(seed: int, num_pairs: int, vocab: int, query_count: int, num_samples: int = 1) -> MqarDataset:
    check_feasible(num_pairs, vocab, query_count)
    rng = Rng(seed).child("mqar")
    half = vocab // 2
    length = 2 * (num_pairs + query_count)
    tokens = np.empty((num_samples, length), np.int64)
    labels = np.full((num_samples, length), IGNORE_INDEX, np.int64)
    for s in range(num_samples):
        keys = rng.choice(half, size=num_pairs, replace=False)
        values = half + rng.integers(0, vocab - half, size=num_pairs)
        asked = rng.integers(0, num_pairs, size=query_count)
        tokens[s, 0:2 * num_pairs:2] = keys
        tokens[s, 1:2 * num_pairs:2] = values
        q0 = 2 * num_pairs
        tokens[s, q0::2] = keys[asked]
        tokens[s, q0 + 1::2] = values[asked]
        labels[s, q0::2] = values[asked]
    return MqarDataset(seed, num_pairs, vocab, query_count, tokens, labels)


def query_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of labelled positions whose arg-max prediction is the label."""
    labels = np.asarray(labels).reshape(-1)
    rows = labels != IGNORE_INDEX
    return float(np.mean(np.argmax(logits[rows], axis=-1) == labels[rows]))
