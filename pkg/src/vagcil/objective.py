"""Label-generation losses.

``nll_loss`` with ``masked=False`` is the ordinary teacher-forced generation
loss. With ``masked=True`` each target row's softmax denominator is
restricted to a task vocabulary, so output-embedding rows outside that
vocabulary get an exact zero gradient.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .seq2seq import BOS, EOS, UNK, Seq2SeqModel, Vocabulary, decode_hidden, encode_batch, output_logits, pad_batch
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaskVocab:
    task_id: int
    token_ids: frozenset[int]
    labels: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.token_ids)

    def __contains__(self, token_id: int) -> bool:
        return token_id in self.token_ids

    def mask(self, vocab_size: int) -> np.ndarray:
        m = np.zeros(vocab_size, dtype=bool)
        m[list(self.token_ids)] = True
        return m


def task_vocab(labels: Sequence[str], vocab: Vocabulary, task_id: int = 0) -> TaskVocab:
    """Union of the label tokens of one task, plus EOS."""
    if not labels:
        raise ContractError("task_vocab needs at least one label")
    ids = {EOS}
    for label in labels:
        toks = [i for i in vocab.encode(label) if i != UNK]
        if not toks:
            raise ContractError(f"label {label!r} has no in-vocabulary tokens")
        ids.update(toks)
    if len(ids) > len(vocab) / 2:
        warnings.warn(f"task {task_id} vocabulary covers {len(ids)} of {len(vocab)} tokens", stacklevel=2)
    return TaskVocab(task_id, frozenset(ids), tuple(labels))


def full_vocab(vocab_size: int) -> TaskVocab:
    return TaskVocab(-1, frozenset(range(vocab_size)), ())


def masked_next_token_dist(logits, vocab: TaskVocab) -> np.ndarray:
    """Next-token probabilities renormalized over ``vocab``; zero elsewhere."""
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if not len(vocab):
        raise ContractError("task vocabulary is empty")
    logp = T.log_softmax(Tensor(x), mask=vocab.mask(x.shape[-1])).data
    return np.exp(logp)


@dataclass
class LossBreakdown:
    total: Tensor
    normal_term: Tensor | None
    vag_term: Tensor | None
    token_count: int
    details: dict = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.total.item()


@dataclass(frozen=True)
class Sample:
    """One training pair; ``vocab`` is the mask used by the masked loss."""

    source: tuple[int, ...]
    target: tuple[int, ...]
    vocab: TaskVocab | None = None


def _teacher_forcing(samples: Sequence[Sample]):
    for s in samples:
        if not s.target or s.target[-1] != EOS:
            raise ContractError("every target must terminate with EOS")
    src_ids, src_mask = pad_batch([s.source for s in samples])
    dec_ids, dec_mask = pad_batch([(BOS,) + s.target[:-1] for s in samples])
    tgt_ids, _ = pad_batch([s.target for s in samples])
    return src_ids, src_mask, dec_ids, dec_mask, tgt_ids


def sample_logits(model: Seq2SeqModel, samples: Sequence[Sample]):
    """Teacher-forced logits ``(B, m, |V|)`` with target ids and validity mask."""
    src_ids, src_mask, dec_ids, dec_mask, tgt_ids = _teacher_forcing(samples)
    memory = encode_batch(model, src_ids, src_mask)
    hidden = decode_hidden(model, memory, src_mask, dec_ids, dec_mask)
    return output_logits(model, hidden), tgt_ids, dec_mask


def _token_nll(logits: Tensor, targets: np.ndarray, valid: np.ndarray, rows: np.ndarray,
               masks: np.ndarray | None) -> tuple[Tensor, int]:
    """Mean -log p(target) over valid target tokens of the selected batch rows."""
    weights = np.zeros(valid.shape)
    weights[rows] = valid[rows]
    count = int(weights.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=logits.dtype)), 0
    # padded positions carry zero weight; point them at EOS so masking never yields -inf * 0
    targets = np.where(weights > 0, targets, EOS)
    if masks is not None:
        masks = masks.copy()
        unused = np.ones(len(masks), dtype=bool)
        unused[rows] = False
        masks[unused] = True  # rows outside this term: any finite mask avoids NaN
        if not masks[np.arange(len(targets))[:, None], targets][weights > 0].all():
            raise ContractError("a target token lies outside its task vocabulary")
        logp = T.log_softmax(logits, mask=masks[:, None, :])
    else:
        logp = T.log_softmax(logits)
    picked = T.pick(logp, targets)
    w = (weights / count).astype(logits.dtype)
    return -(picked * w).sum(), count


def nll_loss(model: Seq2SeqModel, samples: Sequence[Sample], masked: bool = False,
             vocab: TaskVocab | None = None) -> LossBreakdown:
    """Per-token mean negative log-likelihood under teacher forcing.

    When ``masked``, each sample uses ``vocab`` if given, else its own
    ``Sample.vocab``.
    """
    if not samples:
        raise ContractError("nll_loss received an empty batch")
    logits, tgt, valid = sample_logits(model, samples)
    rows = np.arange(len(samples))
    masks = _row_masks(samples, model.vocab_size, vocab) if masked else None
    loss, n = _token_nll(logits, tgt, valid, rows, masks)
    if masked:
        return LossBreakdown(loss, None, loss, n)
    return LossBreakdown(loss, loss, None, n)


def _row_masks(samples, vocab_size, override: TaskVocab | None) -> np.ndarray:
    masks = np.zeros((len(samples), vocab_size), dtype=bool)
    cache: dict[int, np.ndarray] = {}
    for i, s in enumerate(samples):
        tv = override or s.vocab
        if tv is None:
            raise ContractError("masked loss needs a task vocabulary for every sample")
        key = id(tv)
        if key not in cache:
            cache[key] = tv.mask(vocab_size)
        masks[i] = cache[key]
    return masks


def combined_exemplar_loss(
    model: Seq2SeqModel,
    current: Sequence[Sample],
    er: Sequence[Sample] = (),
    lpr: Sequence[Sample] = (),
    mu: float = 1.0,
    exemplar: bool | None = None,
) -> LossBreakdown:
    """Replay-aware VAG objective for one batch.

    ``normal_term`` is the unmasked loss over current + real-replay samples,
    ``vag_term`` the masked loss over current + pseudo-replay samples (each
    with its own task vocabulary). In exemplar mode the total is
    ``normal + mu * vag``; otherwise it is ``vag`` alone. ``exemplar``
    defaults to whether any real-replay samples were given.
    """
    if mu < 0:
        raise ContractError(f"mu must be non-negative, got {mu}")
    if exemplar is None:
        exemplar = len(er) > 0
    if not exemplar and er:
        raise ContractError("real-replay samples given in non-exemplar mode")
    samples = list(current) + list(er) + list(lpr)
    if not samples:
        raise ContractError("combined_exemplar_loss received an empty batch")
    n_cur, n_er = len(current), len(er)
    logits, tgt, valid = sample_logits(model, samples)
    idx = np.arange(len(samples))
    vag_rows = np.concatenate([idx[:n_cur], idx[n_cur + n_er:]])
    vag_samples = [samples[i] for i in vag_rows]
    masks = np.zeros((len(samples), model.vocab_size), dtype=bool)
    masks[vag_rows] = _row_masks(vag_samples, model.vocab_size, None)
    vag, n_vag = _token_nll(logits, tgt, valid, vag_rows, masks)
    details = {"n_current": n_cur, "n_er": n_er, "n_lpr": len(lpr)}
    if not exemplar:
        return LossBreakdown(vag, None, vag, n_vag, details)
    normal, n_normal = _token_nll(logits, tgt, valid, idx[: n_cur + n_er], None)
    total = normal if mu == 0 else normal + vag * mu
    return LossBreakdown(total, normal, vag, n_normal + n_vag, details)
