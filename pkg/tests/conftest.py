from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from vagcil.data import SyntheticSpec, generate_synthetic, split_tasks
from vagcil.harness import LearnerConfig, run_joint, run_single
from vagcil.seq2seq import ModelConfig, Vocabulary, init_model

TINY = ModelConfig(d_model=8, n_heads=2, n_enc_layers=2, n_dec_layers=2, d_ff=16,
                   max_input_len=16, max_target_len=8, dtype="float64")

WORDS = ("transfer money card lost stolen refund balance check account open close "
         "freeze limit travel notice pin change")


@pytest.fixture
def vocab() -> Vocabulary:
    return Vocabulary.build([WORDS])


@pytest.fixture
def tiny_model(vocab):
    return init_model(TINY, vocab, seed=0)


def randomize(model, seed: int = 0, scale: float = 0.5):
    """Replace every parameter with a larger random draw so outputs are far from uniform."""
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.data = rng.normal(0.0, scale, size=p.shape).astype(p.data.dtype)
    return model


# Small benchmark used by fast harness and CLI tests.
SMALL_SPEC = SyntheticSpec(n_classes=6, n_tasks=3, classes_per_task=2, n_train=12, n_val=4, n_test=6,
                           corpus_per_class=4)
SMALL_MODEL = ModelConfig(d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=32)


def small_config(method: str = "vag", **kw) -> LearnerConfig:
    base = dict(epochs=2, pretrain_epochs=1, lr=1e-3, model=SMALL_MODEL, seeds=(0,))
    base.update(kw)
    return LearnerConfig(method=method, **base)


@pytest.fixture(scope="session")
def small_stream():
    return split_tasks(generate_synthetic(SMALL_SPEC), 3, 2, seed=0)


class BenchmarkRuns:
    """Lazily computed default-benchmark runs, shared across test modules."""

    SEEDS = (0, 1, 2)

    def __init__(self):
        self.stream = split_tasks(generate_synthetic(SyntheticSpec()), 5, 4, seed=0)
        self._cache = {}

    def get(self, method: str, seed: int, joint: bool = False, **overrides):
        key = (method, seed, joint, tuple(sorted(overrides.items())))
        if key not in self._cache:
            cfg = LearnerConfig(method=method, **overrides)
            if method in ("er", "vag+er") and "buffer_fraction" not in overrides:
                cfg = replace(cfg, buffer_fraction=0.05)
            run = run_joint if joint else run_single
            self._cache[key] = run(self.stream, cfg, seed)
        return self._cache[key]

    def all(self):
        return list(self._cache.values())


@pytest.fixture(scope="session")
def benchmark():
    return BenchmarkRuns()
