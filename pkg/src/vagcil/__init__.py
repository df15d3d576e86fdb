"""Class-incremental learning by continual label generation.

A small encoder-decoder learns to emit label phrases; predictions are
retrieved from the pool of labels seen so far. The core pieces:

* :mod:`vagcil.tensor`: numpy tensors with a reverse-mode tape
* :mod:`vagcil.seq2seq`: the transformer and greedy decoding
* :mod:`vagcil.objective`: plain and vocabulary-masked generation losses
* :mod:`vagcil.label_pool`: frozen embedder and nearest-label retrieval
* :mod:`vagcil.pseudo_replay`: augmented-label replay of earlier tasks
* :mod:`vagcil.harness`: the training protocol, baselines and replay buffer
* :mod:`vagcil.metrics`: accuracy, confusion and neural-collapse metrics
* :mod:`vagcil.data`: synthetic benchmark, JSONL I/O and task splits
"""

from .data import SyntheticSpec, generate_synthetic, split_tasks
from .errors import (
    ConfigError,
    ContractError,
    DegenerateAxisError,
    NumericError,
    OutOfVocabularyError,
    ProtocolError,
    ShapeError,
)
from .harness import METHODS, LearnerConfig, run_joint, run_sequence, run_single
from .metrics import nc_metric
from .seq2seq import ModelConfig

__version__ = "0.1.0"

__all__ = [
    "METHODS",
    "ConfigError",
    "ContractError",
    "DegenerateAxisError",
    "LearnerConfig",
    "ModelConfig",
    "NumericError",
    "OutOfVocabularyError",
    "ProtocolError",
    "ShapeError",
    "SyntheticSpec",
    "generate_synthetic",
    "nc_metric",
    "run_joint",
    "run_sequence",
    "run_single",
    "split_tasks",
]
