import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vagcil.errors import ContractError
from vagcil.label_pool import FrozenEmbedder
from vagcil.objective import task_vocab
from vagcil.pseudo_replay import (
    LabelSource,
    RelatednessTable,
    augment_label,
    build_lpr,
    lpr_count,
    n_insertions,
    sample_lpr,
)
from vagcil.seq2seq import EOS, SPECIALS, Vocabulary

WORDS = [f"w{i}" for i in range(60)]


@pytest.fixture(scope="module")
def setup():
    vocab = Vocabulary.build([" ".join(WORDS)])
    return vocab, RelatednessTable(FrozenEmbedder(vocab, seed=0))


_TABLES = {}


def _shared_table(vocab):
    if "t" not in _TABLES:
        _TABLES["t"] = RelatednessTable(FrozenEmbedder(vocab, seed=0))
    return _TABLES["t"]


def strip(aug):
    return tuple(t for i, t in enumerate(aug.tokens) if i not in set(aug.inserted))


def test_insertion_counts(setup):
    vocab, rel = setup
    rng = np.random.default_rng(0)
    assert [n_insertions(n) for n in (1, 3, 10, 11)] == [1, 1, 3, 4]
    three = augment_label([5, 6, 7], rel, rng)
    assert len(three.tokens) == 4 and len(three.inserted) == 1
    ten = augment_label(list(range(5, 15)), rel, rng)
    assert len(ten.tokens) == 13
    with pytest.raises(ContractError):
        augment_label([], rel, rng)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(4, 63), min_size=1, max_size=12), st.integers(0, 2**32 - 1))
def test_augmentation_only_inserts_neighbors(y, seed):
    vocab = Vocabulary.build([" ".join(WORDS)])
    rel = _shared_table(vocab)
    aug = augment_label(y, rel, np.random.default_rng(seed))
    assert strip(aug) == tuple(y)
    assert len(aug.inserted) == n_insertions(len(y))
    related = set().union(*(set(rel[t].tolist()) for t in y))
    assert all(aug.tokens[i] in related for i in aug.inserted)


def test_relatedness_excludes_self_and_specials(setup):
    vocab, rel = setup
    for tok in range(len(SPECIALS), len(vocab)):
        nbrs = rel[tok].tolist()
        assert len(nbrs) == 10 and tok not in nbrs
        assert all(n >= len(SPECIALS) for n in nbrs)
    again = RelatednessTable(FrozenEmbedder(vocab, seed=0))
    assert all(np.array_equal(rel[t], again[t]) for t in range(4, len(vocab)))


def test_no_neighbors_skips_insertion(caplog):
    vocab = Vocabulary.build(["lonely"])
    rel = RelatednessTable(FrozenEmbedder(vocab))
    with caplog.at_level(logging.WARNING):
        aug = augment_label([vocab.stoi["lonely"]], rel, np.random.default_rng(0))
    assert aug.tokens == (vocab.stoi["lonely"],) and aug.inserted == ()
    assert "no neighbors" in caplog.text


def sources(vocab, n_tasks, per_task):
    out = []
    for t in range(1, n_tasks + 1):
        labels = [f"{WORDS[(t * per_task + i) % 60]} {WORDS[(t * 7 + i) % 60]}" for i in range(per_task)]
        tv = task_vocab(labels, vocab, t)
        out += [LabelSource(tuple(vocab.encode(lab)), t, tv) for lab in labels]
    return out


def test_build_lpr_counts_and_masks(setup):
    vocab, rel = setup
    rng = np.random.default_rng(1)
    prev = sources(vocab, 2, 10)
    assert build_lpr(prev, 1, rel, rng) == []
    pairs = build_lpr(prev, 3, rel, rng)
    assert len(pairs) == 20
    for pair, src in zip(pairs, prev):
        assert pair.target == src.ids + (EOS,)
        assert pair.vocab is src.vocab and pair.vocab.task_id == src.task_id
    with pytest.raises(ContractError):
        build_lpr(prev, 2, rel, rng)


def test_lpr_count_rule():
    assert lpr_count(0.1, 100) == 10
    assert lpr_count(0.0, 100) == 0
    assert lpr_count(0.1, 4) == 0
    assert lpr_count(0.1, 5) == 1
    assert lpr_count(0.1, 15) == 2
    with pytest.raises(ContractError):
        lpr_count(-0.1, 10)


def test_sample_lpr_counts_and_starvation(setup, caplog):
    vocab, rel = setup
    prev = sources(vocab, 2, 10)
    rng = np.random.default_rng(2)
    assert len(sample_lpr(prev, 0.1, 100, rel, rng)) == 10
    assert sample_lpr(prev, 0.0, 100, rel, rng) == []
    with caplog.at_level(logging.WARNING):
        assert sample_lpr(prev, 0.1, 4, rel, rng) == []
    assert "no pseudo replay" in caplog.text
    with pytest.raises(ContractError):
        sample_lpr(prev, -1.0, 10, rel, rng)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 2), st.integers(0, 500))
def test_sample_count_law(lam, n):
    vocab = Vocabulary.build([" ".join(WORDS)])
    rel = _shared_table(vocab)
    got = sample_lpr(sources(vocab, 1, 5), lam, n, rel, np.random.default_rng(0))
    assert len(got) == int(np.floor(lam * n + 0.5 + 1e-12))


def test_refreshes_are_fresh(setup):
    vocab, rel = setup
    prev = sources(vocab, 2, 10)
    differ = 0
    for seed in range(100):
        a = build_lpr(prev, 3, rel, np.random.default_rng(seed))
        b = build_lpr(prev, 3, rel, np.random.default_rng(seed + 10_000))
        differ += any(x.source != y.source for x, y in zip(a, b))
    assert differ >= 99
