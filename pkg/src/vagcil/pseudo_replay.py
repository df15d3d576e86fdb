"""Label-based pseudo replay: noisy copies of earlier labels as extra training inputs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .label_pool import FrozenEmbedder
from .objective import Sample, TaskVocab
from .seq2seq import EOS, SPECIALS

log = logging.getLogger(__name__)

INSERT_RATIO = 0.3
N_NEIGHBORS = 10


class RelatednessTable:
    """For every content token, its ``k`` nearest tokens under the embedder's cosine."""

    def __init__(self, embedder: FrozenEmbedder, k: int = N_NEIGHBORS):
        self.k = k
        table = embedder.table
        norms = np.linalg.norm(table, axis=1, keepdims=True)
        unit = table / np.where(norms > 0, norms, 1.0)
        sims = unit @ unit.T
        n_special = len(SPECIALS)
        sims[:, :n_special] = -np.inf
        np.fill_diagonal(sims, -np.inf)
        # stable sort keeps ties in id order
        order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        self.neighbors: dict[int, np.ndarray] = {}
        for tok in range(n_special, len(table)):
            row = order[tok]
            self.neighbors[tok] = row[np.isfinite(sims[tok, row])]

    def __getitem__(self, token_id: int) -> np.ndarray:
        return self.neighbors.get(token_id, np.empty(0, dtype=np.int64))


@dataclass
class Augmented:
    tokens: tuple[int, ...]
    inserted: tuple[int, ...]  # positions in ``tokens`` holding inserted tokens


def n_insertions(length: int) -> int:
    return math.ceil(round(INSERT_RATIO * length, 9))


def augment_label(y: Sequence[int], relatedness: RelatednessTable, rng: np.random.Generator) -> Augmented:
    """Insert ``ceil(0.3 * len(y))`` related tokens at uniform positions.

    Each inserted token is a uniform pick from the neighbors of a uniformly
    chosen anchor token of ``y``. Original tokens keep their order.
    """
    y = list(y)
    if not y:
        raise ContractError("cannot augment an empty label")
    out = list(y)
    is_inserted = [False] * len(y)
    for _ in range(n_insertions(len(y))):
        anchor = y[rng.integers(len(y))]
        nbrs = relatedness[anchor]
        if len(nbrs) == 0:
            log.warning("token %d has no neighbors; insertion skipped", anchor)
            continue
        tok = int(nbrs[rng.integers(len(nbrs))])
        pos = int(rng.integers(len(out) + 1))
        out.insert(pos, tok)
        is_inserted.insert(pos, True)
    return Augmented(tuple(out), tuple(i for i, f in enumerate(is_inserted) if f))


@dataclass(frozen=True)
class LabelSource:
    """A previous-task label and the vocabulary its task trained with."""

    ids: tuple[int, ...]
    task_id: int
    vocab: TaskVocab


def build_lpr(previous: Sequence[LabelSource], current_task: int,
              relatedness: RelatednessTable, rng: np.random.Generator) -> list[Sample]:
    """One fresh ``(aug(y), y)`` pair per distinct earlier label."""
    if current_task <= 1:
        return []
    seen = set()
    out = []
    for src in previous:
        if src.task_id >= current_task:
            raise ContractError(f"label from task {src.task_id} is not earlier than task {current_task}")
        if src.ids in seen:
            continue
        seen.add(src.ids)
        aug = augment_label(src.ids, relatedness, rng)
        out.append(Sample(aug.tokens, src.ids + (EOS,), src.vocab))
    return out


def lpr_count(lam: float, n_current: int) -> int:
    """``round(lam * n_current)`` with halves rounded up."""
    if lam < 0:
        raise ContractError(f"lambda must be non-negative, got {lam}")
    return int(math.floor(lam * n_current + 0.5 + 1e-12))


def sample_lpr(previous: Sequence[LabelSource], lam: float, n_current: int,
               relatedness: RelatednessTable, rng: np.random.Generator) -> list[Sample]:
    """Draw ``round(lam * n_current)`` pseudo samples with replacement, re-augmenting each draw."""
    n = lpr_count(lam, n_current)
    if n == 0 or not previous:
        if lam > 0 and n == 0 and previous:
            log.warning("lambda=%g with %d current samples yields no pseudo replay", lam, n_current)
        return []
    picks = rng.integers(len(previous), size=n)
    out = []
    for i in picks:
        src = previous[int(i)]
        aug = augment_label(src.ids, relatedness, rng)
        out.append(Sample(aug.tokens, src.ids + (EOS,), src.vocab))
    return out
