"""Growing label pool with cosine-similarity retrieval over a frozen embedder."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError
from .seq2seq import Seq2SeqModel, Vocabulary, greedy_decode_batch

log = logging.getLogger(__name__)

D_EMBED = 64


class FrozenEmbedder:
    """Mean of fixed per-token vectors, L2-normalized.

    The token table is drawn once from ``N(0, 1)`` with ``seed`` and never
    trained. Rows may be overridden from a token-vector file.
    """

    def __init__(self, vocab: Vocabulary, d_embed: int = D_EMBED, seed: int = 0,
                 table: np.ndarray | None = None):
        self.vocab = vocab
        self.seed = seed
        if table is None:
            table = np.random.default_rng(seed).normal(size=(len(vocab), d_embed))
        if table.shape[0] != len(vocab):
            raise ContractError(f"embedder table has {table.shape[0]} rows for {len(vocab)} tokens")
        self.table = np.asarray(table, dtype=np.float64)
        self.table.setflags(write=False)

    @property
    def d_embed(self) -> int:
        return self.table.shape[1]

    @classmethod
    def from_file(cls, path: str | Path, vocab: Vocabulary, seed: int = 0) -> "FrozenEmbedder":
        """Load ``token v1 ... vd`` lines; tokens missing from the file keep seeded vectors."""
        vectors = read_token_vectors(path)
        if not vectors:
            raise ContractError(f"{path}: no token vectors")
        d = len(next(iter(vectors.values())))
        table = np.random.default_rng(seed).normal(size=(len(vocab), d))
        for tok, vec in vectors.items():
            if tok in vocab:
                table[vocab.stoi[tok.lower()]] = vec
        return cls(vocab, d, seed, table)

    def embed(self, ids: Sequence[int]) -> np.ndarray:
        """Unit vector for a token sequence; the zero vector for an empty one."""
        if len(ids) == 0:
            return np.zeros(self.d_embed)
        v = self.table[np.asarray(ids, dtype=np.int64)].mean(axis=0)
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else v

    def embed_text(self, text: str) -> np.ndarray:
        return self.embed(self.vocab.encode(text))


def read_token_vectors(path: str | Path) -> dict[str, np.ndarray]:
    vectors: dict[str, np.ndarray] = {}
    d = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            vec = np.array([float(x) for x in parts[1:]])
        except ValueError as exc:
            raise ContractError(f"{path}:{lineno}: malformed vector") from exc
        if d is None:
            d = len(vec)
        if len(vec) != d or d == 0:
            raise ContractError(f"{path}:{lineno}: expected {d} components, got {len(vec)}")
        vectors[parts[0]] = vec
    return vectors


def write_token_vectors(path: str | Path, tokens: Sequence[str], table: np.ndarray) -> None:
    lines = [tok + " " + " ".join(f"{x:.6f}" for x in row) for tok, row in zip(tokens, table)]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class PoolEntry:
    ids: tuple[int, ...]
    text: str
    task_id: int
    embedding: np.ndarray


@dataclass
class LabelPool:
    embedder: FrozenEmbedder
    entries: list[PoolEntry] = field(default_factory=list)
    fallback_events: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, label: str) -> bool:
        ids = tuple(self.embedder.vocab.encode(label))
        return any(e.ids == ids for e in self.entries)

    @property
    def labels(self) -> list[str]:
        return [e.text for e in self.entries]

    def add_labels(self, labels: Sequence[str], task_id: int) -> int:
        """Append unseen label sequences; returns how many were new."""
        known = {e.ids for e in self.entries}
        added = 0
        for label in labels:
            ids = tuple(self.embedder.vocab.encode(label))
            if ids in known:
                continue
            known.add(ids)
            self.entries.append(PoolEntry(ids, label, task_id, self.embedder.embed(ids)))
            added += 1
        return added

    def matrix(self) -> np.ndarray:
        return np.stack([e.embedding for e in self.entries])

    def retrieve(self, y_gen: Sequence[int]) -> tuple[PoolEntry, float]:
        """Pool entry with the highest cosine to ``y_gen``; ties go to the earliest entry."""
        if not self.entries:
            raise ContractError("cannot retrieve from an empty label pool")
        if len(y_gen) == 0:
            self.fallback_events += 1
            log.debug("empty generation, falling back to first pool entry")
            return self.entries[0], -1.0
        scores = self.matrix() @ self.embedder.embed(y_gen)
        best = int(np.argmax(scores))
        return self.entries[best], float(scores[best])

    def retrieve_many(self, generations: Sequence[Sequence[int]]) -> list[tuple[PoolEntry, float]]:
        if not self.entries:
            raise ContractError("cannot retrieve from an empty label pool")
        mat = self.matrix()
        out = []
        for y in generations:
            if len(y) == 0:
                self.fallback_events += 1
                out.append((self.entries[0], -1.0))
                continue
            scores = mat @ self.embedder.embed(y)
            best = int(np.argmax(scores))
            out.append((self.entries[best], float(scores[best])))
        return out


@dataclass
class Prediction:
    label: str
    generated: tuple[int, ...]
    score: float


def predict(model: Seq2SeqModel, pool: LabelPool, x: Sequence[int], max_len: int = 8) -> Prediction:
    return predict_batch(model, pool, [x], max_len)[0]


def predict_batch(model: Seq2SeqModel, pool: LabelPool, inputs: Sequence[Sequence[int]],
                  max_len: int = 8, batch_size: int = 256) -> list[Prediction]:
    """Greedy-generate a label for each input, then snap it to the pool."""
    preds = []
    for start in range(0, len(inputs), batch_size):
        gens = greedy_decode_batch(model, inputs[start:start + batch_size], max_len)
        for y, (entry, score) in zip(gens, pool.retrieve_many(gens)):
            preds.append(Prediction(entry.text, tuple(y), score))
    return preds
