"""Class-incremental training protocol, baselines and replay buffers.

A run trains tasks strictly in order. After each task every seen task's test
split is evaluated through a prediction path that only ever sees the input
text, never the task id.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import ExampleRecord, Task, TaskStream
from .errors import ConfigError, ContractError, ProtocolError, ShapeError
from .label_pool import FrozenEmbedder, LabelPool, predict_batch
from .metrics import confusion_matrix, final_accuracy, last_task_bias, nc_metric
from .objective import Sample, TaskVocab, combined_exemplar_loss, nll_loss, task_vocab
from .optim import AdamW
from .pseudo_replay import LabelSource, RelatednessTable, lpr_count, sample_lpr
from .seq2seq import (
    EOS,
    UNK,
    ModelConfig,
    Seq2SeqModel,
    Vocabulary,
    encode_batch,
    init_model,
    pad_batch,
    pool,
    sequence_features,
)
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

METHODS = ("vanilla-classifier", "vanilla-G", "ewc-G", "er", "vag", "vag+er")
GENERATIVE = {"vanilla-G", "ewc-G", "vag", "vag+er"}
BUFFER_PRESETS = (0.0, 0.01, 0.03, 0.05)


@dataclass
class LearnerConfig:
    method: str = "vag"
    lambda_lpr: float = 0.1
    mu: float = 1.0
    ewc_weight: float = 5000.0
    buffer_fraction: float = 0.0
    epochs: int = 10
    batch_size: int = 8
    lr: float = 5e-5
    weight_decay: float = 0.0
    clip_norm: float | None = 1.0
    patience: int = 2
    pretrain_epochs: int = 15
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 16
    max_decode_len: int = 8
    embed_seed: int = 0
    use_token_vectors: bool = True
    seeds: tuple[int, ...] = (0, 1, 2)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.lambda_lpr < 0:
            raise ConfigError("lambda_lpr must be >= 0")
        if self.mu < 0:
            raise ConfigError("mu must be >= 0")
        if not 0 <= self.buffer_fraction <= 1:
            raise ConfigError("buffer_fraction must be in [0, 1]")
        if self.method in ("er", "vag+er") and self.buffer_fraction <= 0:
            raise ConfigError(f"method {self.method} needs buffer_fraction > 0")
        if self.method not in ("er", "vag+er") and self.buffer_fraction > 0:
            raise ConfigError(f"method {self.method} does not use a replay buffer")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.patience < 1:
            raise ConfigError("epochs, batch_size, patience must be >= 1 and lr > 0")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.model.validate()

    @property
    def generative(self) -> bool:
        return self.method in GENERATIVE

    def echo(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


# ---------------------------------------------------------------------------
# Replay buffer and EWC
# ---------------------------------------------------------------------------


@dataclass
class ReplayItem:
    source: tuple[int, ...]
    label: str
    task_id: int


@dataclass
class ReplayBuffer:
    fraction: float = 0.0
    items: list[ReplayItem] = field(default_factory=list)
    seen: int = 0

    def __len__(self) -> int:
        return len(self.items)


def update_buffer(buffer: ReplayBuffer, items: Sequence[ReplayItem], p: float,
                  rng: np.random.Generator) -> int:
    """Store ``round(p * len(items))`` of one task's examples, class-balanced.

    Each class contributes ``k // C`` examples; the remainder is drawn at
    random from what is left. Earlier contents are untouched. Returns the
    number stored.
    """
    if not 0 <= p <= 1:
        raise ContractError(f"buffer fraction {p} outside [0, 1]")
    buffer.seen += len(items)
    k = lpr_count(p, len(items))
    if k == 0:
        return 0
    by_class: dict[str, list[int]] = {}
    for i, it in enumerate(items):
        by_class.setdefault(it.label, []).append(i)
    per_class = k // len(by_class)
    chosen: list[int] = []
    leftover: list[int] = []
    for label in by_class:
        idx = by_class[label]
        perm = [idx[j] for j in rng.permutation(len(idx))]
        chosen.extend(perm[:per_class])
        leftover.extend(perm[per_class:])
    rest = k - len(chosen)
    if rest > 0:
        chosen.extend(leftover[j] for j in rng.choice(len(leftover), size=min(rest, len(leftover)), replace=False))
    buffer.items.extend(items[i] for i in sorted(chosen))
    return len(chosen)


def ewc_penalty(params: dict[str, Tensor], anchor: dict[str, np.ndarray],
                fisher: dict[str, np.ndarray], weight: float) -> Tensor:
    """``weight / 2 * sum_i F_i (theta_i - theta*_i)^2``."""
    total = None
    for name, f in fisher.items():
        p = params[name]
        if p.shape != anchor[name].shape or f.shape != p.shape:
            raise ShapeError(f"EWC shape mismatch for {name}: {p.shape} vs {anchor[name].shape}")
        diff = p - Tensor(anchor[name].astype(p.dtype))
        term = (diff * diff * Tensor(f.astype(p.dtype))).sum()
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros(()))
    return total * (weight / 2.0)


# ---------------------------------------------------------------------------
# Learner state
# ---------------------------------------------------------------------------


@dataclass
class LearnerState:
    config: LearnerConfig
    model: Seq2SeqModel
    pool: LabelPool
    relatedness: RelatednessTable
    rng: np.random.Generator
    head_w: Tensor | None = None
    head_b: Tensor | None = None
    head_labels: list[str] = field(default_factory=list)
    vocabs: dict[int, TaskVocab] = field(default_factory=dict)
    sources: list[LabelSource] = field(default_factory=list)
    buffer: ReplayBuffer = field(default_factory=ReplayBuffer)
    ewc_anchor: dict[str, np.ndarray] | None = None
    ewc_fisher: dict[str, np.ndarray] | None = None
    tasks_done: int = 0
    events: list[dict] = field(default_factory=list)

    @property
    def vocab(self) -> Vocabulary:
        return self.model.vocab

    def encode_text(self, text: str) -> tuple[int, ...]:
        return tuple(self.vocab.encode(text))

    def label_ids(self, label: str) -> tuple[int, ...]:
        return tuple(i for i in self.vocab.encode(label) if i != UNK)


def build_embedder(vocab: Vocabulary, config: LearnerConfig, vectors: dict | None) -> FrozenEmbedder:
    if vectors and config.use_token_vectors:
        d = len(next(iter(vectors.values())))
        table = np.random.default_rng(config.embed_seed).normal(size=(len(vocab), d))
        for tok, vec in vectors.items():
            if tok in vocab:
                table[vocab.stoi[tok]] = vec
        return FrozenEmbedder(vocab, d, config.embed_seed, table)
    return FrozenEmbedder(vocab, seed=config.embed_seed)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

_PRETRAIN_CACHE: dict[str, dict[str, np.ndarray]] = {}


def corrupt(ids: Sequence[int], rng: np.random.Generator, mask_rate: float = 0.15,
            drop_rate: float = 0.1) -> list[int]:
    """Token masking (to UNK) and deletion; never returns an empty sequence."""
    out = []
    for tok in ids:
        r = rng.random()
        if r < drop_rate:
            continue
        out.append(UNK if r < drop_rate + mask_rate else tok)
    return out or [UNK]


def pretrain(model: Seq2SeqModel, corpus: Sequence[str], config: LearnerConfig,
             rng: np.random.Generator) -> None:
    """Denoising reconstruction of ``corpus`` for ``config.pretrain_epochs`` epochs."""
    if not corpus or config.pretrain_epochs <= 0:
        return
    key = hashlib.sha256(repr((list(corpus), asdict(model.config), model.seed, model.vocab.digest(),
                               config.pretrain_epochs, config.pretrain_lr,
                               config.pretrain_batch_size)).encode()).hexdigest()
    if key in _PRETRAIN_CACHE:
        model.load_state(_PRETRAIN_CACHE[key])
        return
    limit = model.config.max_target_len - 1
    docs = [tuple(model.vocab.encode(t))[:limit] for t in corpus]
    opt = AdamW(model.params.values(), lr=config.pretrain_lr, clip_norm=config.clip_norm)
    for _ in range(config.pretrain_epochs):
        order = rng.permutation(len(docs))
        for start in range(0, len(order), config.pretrain_batch_size):
            batch = [Sample(tuple(corrupt(docs[i], rng)), docs[i] + (EOS,))
                     for i in order[start:start + config.pretrain_batch_size]]
            _step(model, opt, lambda: nll_loss(model, batch).total)
    _PRETRAIN_CACHE[key] = model.state()


def _step(model: Seq2SeqModel, opt: AdamW, loss_fn, extra: Sequence[Tensor] = ()) -> float:
    model.zero_grad()
    for t in extra:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    opt.step()
    return loss.item()


# ---------------------------------------------------------------------------
# Classifier baseline
# ---------------------------------------------------------------------------


def _grow_head(state: LearnerState, labels: Sequence[str]) -> None:
    d = state.model.config.d_model
    dtype = np.dtype(state.model.config.dtype)
    new_w = state.rng.normal(0.0, state.model.config.init_std, size=(d, len(labels))).astype(dtype)
    new_b = np.zeros(len(labels), dtype=dtype)
    if state.head_w is None:
        state.head_w = Tensor(new_w, requires_grad=True)
        state.head_b = Tensor(new_b, requires_grad=True)
    else:
        state.head_w = Tensor(np.concatenate([state.head_w.data, new_w], axis=1), requires_grad=True)
        state.head_b = Tensor(np.concatenate([state.head_b.data, new_b]), requires_grad=True)
    state.head_labels.extend(labels)


def _classifier_logits(state: LearnerState, sources: Sequence[Sequence[int]]) -> Tensor:
    ids, mask = pad_batch(sources)
    feats = pool(encode_batch(state.model, ids, mask), mask)
    return feats @ state.head_w + state.head_b


def classifier_loss(state: LearnerState, items: Sequence[tuple[tuple[int, ...], str]]) -> Tensor:
    index = {lab: i for i, lab in enumerate(state.head_labels)}
    logits = _classifier_logits(state, [s for s, _ in items])
    targets = np.array([index[lab] for _, lab in items])
    return -T.pick(T.log_softmax(logits), targets).mean()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def new_state(model: Seq2SeqModel, config: LearnerConfig, vectors: dict | None,
              rng: np.random.Generator) -> LearnerState:
    embedder = build_embedder(model.vocab, config, vectors)
    return LearnerState(
        config=config,
        model=model,
        pool=LabelPool(embedder),
        relatedness=RelatednessTable(embedder),
        rng=rng,
        buffer=ReplayBuffer(config.buffer_fraction),
    )


def _fisher(state: LearnerState, samples: Sequence[Sample]) -> dict[str, np.ndarray]:
    """Mean squared per-example gradient of the unmasked generation loss."""
    model = state.model
    acc = {k: np.zeros(v.shape) for k, v in model.params.items()}
    for s in samples:
        model.zero_grad()
        with Tape() as tape:
            loss = nll_loss(model, [s]).total
        tape.backward(loss)
        for k, p in model.params.items():
            if p.grad is not None:
                acc[k] += p.grad.astype(np.float64) ** 2
    model.zero_grad()
    return {k: v / len(samples) for k, v in acc.items()}


def _chunks(items: list, n: int) -> list[list]:
    return [list(c) for c in np.array_split(np.asarray(items, dtype=object), n)] if items else [[] for _ in range(n)]


def train_task(state: LearnerState, task: Task) -> LearnerState:
    """Train on one task of the stream and register its classes."""
    cfg = state.config
    if task.task_id != state.tasks_done + 1:
        raise ProtocolError(f"expected task {state.tasks_done + 1}, got task {task.task_id}")
    model, rng = state.model, state.rng
    t = task.task_id

    vt = task_vocab(task.labels, state.vocab, t)
    state.vocabs[t] = vt
    label_tgt = {lab: state.label_ids(lab) + (EOS,) for lab in task.labels}
    current = [Sample(state.encode_text(r.text), label_tgt[r.label], vt) for r in task.train]
    val = [Sample(state.encode_text(r.text), label_tgt[r.label], vt) for r in task.val]
    cur_items = [(state.encode_text(r.text), r.label) for r in task.train]
    val_items = [(state.encode_text(r.text), r.label) for r in task.val]

    if not cfg.generative:
        _grow_head(state, task.labels)
    trainable = list(model.params.values())
    if not cfg.generative:
        trainable += [state.head_w, state.head_b]
    opt = AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)

    er_samples = [Sample(it.source, state.label_ids(it.label) + (EOS,), state.vocabs[it.task_id])
                  for it in state.buffer.items]
    er_items = [(it.source, it.label) for it in state.buffer.items]

    def val_loss() -> float:
        losses = []
        for start in range(0, len(val), 64):
            if cfg.generative:
                chunk = val[start:start + 64]
                masked = cfg.method in ("vag", "vag+er")
                losses.append(nll_loss(model, chunk, masked=masked).value * len(chunk))
            else:
                chunk = val_items[start:start + 64]
                losses.append(classifier_loss(state, chunk).item() * len(chunk))
        return sum(losses) / max(len(val), 1)

    best = (math.inf, None)
    bad_epochs = 0
    n_batches = max(1, math.ceil(len(current) / cfg.batch_size))
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(current))
        lpr: list[Sample] = []
        if cfg.method in ("vag", "vag+er") and t > 1:
            lpr = sample_lpr(state.sources, cfg.lambda_lpr, len(current), state.relatedness, rng)
            state.events.append({"task": t, "epoch": epoch, "kind": "lpr", "n": len(lpr),
                                 "expected": lpr_count(cfg.lambda_lpr, len(current))})
        er_order = rng.permutation(len(er_samples)) if er_samples else np.array([], dtype=int)
        cur_chunks = np.array_split(order, n_batches)
        er_chunks = np.array_split(er_order, n_batches)
        lpr_chunks = _chunks(lpr, n_batches)
        for b in range(n_batches):
            cur_b = [current[i] for i in cur_chunks[b]]
            if not cur_b:
                continue
            er_b = [er_samples[i] for i in er_chunks[b]]
            if cfg.method == "vanilla-G":
                fn = lambda: nll_loss(model, cur_b).total
            elif cfg.method == "ewc-G":
                def fn(cur_b=cur_b):
                    loss = nll_loss(model, cur_b).total
                    if state.ewc_fisher is not None:
                        loss = loss + ewc_penalty(model.params, state.ewc_anchor, state.ewc_fisher, cfg.ewc_weight)
                    return loss
            elif cfg.method == "vag":
                fn = lambda: combined_exemplar_loss(model, cur_b, (), lpr_chunks[b], cfg.mu, exemplar=False).total
            elif cfg.method == "vag+er":
                fn = lambda: combined_exemplar_loss(model, cur_b, er_b, lpr_chunks[b], cfg.mu, exemplar=True).total
            else:
                items = [cur_items[i] for i in cur_chunks[b]]
                if cfg.method == "er":
                    items += [er_items[i] for i in er_chunks[b]]
                fn = lambda: classifier_loss(state, items)
            _step(model, opt, fn, extra=[state.head_w, state.head_b] if not cfg.generative else ())
        vl = val_loss()
        log.debug("task %d epoch %d val_loss %.4f", t, epoch, vl)
        if vl < best[0] - 1e-6:
            best = (vl, _snapshot(state))
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
    if best[1] is not None:
        _restore(state, best[1])
    model.zero_grad()

    if cfg.method == "ewc-G":
        fisher = _fisher(state, current)
        if state.ewc_fisher is not None:
            fisher = {k: fisher[k] + state.ewc_fisher[k] for k in fisher}
        state.ewc_fisher = fisher
        state.ewc_anchor = model.state()
    if cfg.buffer_fraction > 0:
        items = [ReplayItem(state.encode_text(r.text), r.label, t) for r in task.train]
        stored = update_buffer(state.buffer, items, cfg.buffer_fraction, rng)
        state.events.append({"task": t, "epoch": -1, "kind": "buffer", "n": stored,
                             "expected": lpr_count(cfg.buffer_fraction, len(items)),
                             "size": len(state.buffer)})
    state.pool.add_labels(task.labels, t)
    state.sources.extend(LabelSource(state.label_ids(lab), t, vt) for lab in task.labels)
    state.tasks_done = t
    return state


def _snapshot(state: LearnerState) -> dict:
    snap = {"model": state.model.state()}
    if state.head_w is not None:
        snap["head"] = (state.head_w.data.copy(), state.head_b.data.copy())
    return snap


def _restore(state: LearnerState, snap: dict) -> None:
    state.model.load_state(snap["model"])
    if "head" in snap:
        state.head_w.data, state.head_b.data = (a.copy() for a in snap["head"])


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def predict_texts(state: LearnerState, texts: Sequence[str]) -> list[str]:
    """Predicted class label for each input. Takes inputs only, never task ids."""
    sources = [state.encode_text(x) or (UNK,) for x in texts]
    if state.config.generative:
        preds = predict_batch(state.model, state.pool, sources, state.config.max_decode_len)
        return [p.label for p in preds]
    out = []
    for start in range(0, len(sources), 256):
        logits = _classifier_logits(state, sources[start:start + 256]).data
        out.extend(state.head_labels[i] for i in logits.argmax(axis=1))
    return out


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    method: str
    seed: int
    labels: list[str]
    task_labels: list[list[str]]
    acc_matrix: np.ndarray
    confusion: np.ndarray
    nc: list[float]
    final_accuracy: float
    last_task_bias: float
    seen_accuracy: list[float]
    bias_trajectory: list[float]
    events: list[dict]
    closed_world_violations: int
    fallback_events: int
    config: dict
    elapsed: float = 0.0

    @property
    def final_nc(self) -> float:
        return self.nc[-1]


@dataclass
class MultiRunReport:
    reports: list[RunReport]

    def _stat(self, attr: str) -> tuple[float, float]:
        vals = np.array([getattr(r, attr) for r in self.reports], dtype=np.float64)
        return float(vals.mean()), float(vals.std())

    @property
    def final_accuracy(self) -> tuple[float, float]:
        return self._stat("final_accuracy")

    @property
    def last_task_bias(self) -> tuple[float, float]:
        return self._stat("last_task_bias")

    @property
    def final_nc(self) -> tuple[float, float]:
        return self._stat("final_nc")


def prepare_model(stream: TaskStream, config: LearnerConfig, seed: int,
                  vocab: Vocabulary | None = None) -> Seq2SeqModel:
    ds = stream.dataset
    if vocab is None:
        if ds is not None:
            vocab = ds.vocabulary()
        else:
            texts = [x for t in stream for split in (t.train, t.val, t.test) for r in split for x in (r.text, r.label)]
            vocab = Vocabulary.build(texts)
    model = init_model(config.model, vocab, seed)
    corpus = ds.corpus if ds is not None else []
    pretrain(model, corpus, config, np.random.default_rng([seed, 1]))
    return model


def _probe(stream: TaskStream) -> tuple[list[str], list[str]]:
    texts, classes = [], []
    for t in stream:
        for r in t.test:
            texts.append(r.text)
            classes.append(r.label)
    return texts, classes


def _nc_of(state: LearnerState, probe_ids, probe_classes) -> float:
    return nc_metric(sequence_features(state.model, probe_ids), probe_classes)


def run_single(stream: TaskStream, config: LearnerConfig, seed: int) -> RunReport:
    """One full class-incremental pass over ``stream`` with one seed."""
    config.validate()
    t0 = time.perf_counter()
    model = prepare_model(stream, config, seed)
    vectors = stream.dataset.token_vectors if stream.dataset is not None else None
    state = new_state(model, config, vectors, np.random.default_rng([seed, 2]))
    probe_texts, probe_classes = _probe(stream)
    probe_ids = [state.encode_text(x) or (UNK,) for x in probe_texts]

    n = len(stream)
    acc = np.full((n, n), np.nan)
    nc = [_nc_of(state, probe_ids, probe_classes)]
    violations = 0
    seen_acc: list[float] = []
    bias: list[float] = []
    preds: list[str] = []
    truth: list[str] = []
    for task in stream:
        train_task(state, task)
        known = set(state.pool.labels) if config.generative else set(state.head_labels)
        preds, truth = [], []
        for i, seen in enumerate(stream.tasks[: task.task_id]):
            p = predict_texts(state, [r.text for r in seen.test])
            violations += sum(lab not in known for lab in p)
            y = [r.label for r in seen.test]
            acc[task.task_id - 1, i] = float(np.mean([a == b for a, b in zip(p, y)]))
            preds += p
            truth += y
        nc.append(_nc_of(state, probe_ids, probe_classes))
        seen_acc.append(float(np.mean([a == b for a, b in zip(preds, truth)])))
        newest = set(task.labels)
        bias.append(float(np.mean([p in newest for p in preds])))
        log.info("%s seed=%d task=%d acc=%.3f", config.method, seed, task.task_id, seen_acc[-1])

    labels = stream.all_labels
    cm = confusion_matrix(truth, preds, labels)
    last = [labels.index(lab) for lab in stream.tasks[-1].labels]
    return RunReport(
        method=config.method,
        seed=seed,
        labels=labels,
        task_labels=[list(t.labels) for t in stream],
        acc_matrix=acc,
        confusion=cm,
        nc=nc,
        final_accuracy=final_accuracy(cm),
        last_task_bias=last_task_bias(cm, last),
        seen_accuracy=seen_acc,
        bias_trajectory=bias,
        events=state.events,
        closed_world_violations=violations,
        fallback_events=state.pool.fallback_events,
        config=config.echo(),
        elapsed=time.perf_counter() - t0,
    )


def run_sequence(stream: TaskStream, config: LearnerConfig) -> MultiRunReport:
    """``run_single`` for every seed in ``config.seeds``."""
    config.validate()
    return MultiRunReport([run_single(stream, config, s) for s in config.seeds])


def joint_stream(stream: TaskStream) -> TaskStream:
    """All tasks merged into one, for the non-continual upper bound."""
    merged = Task(1, stream.all_labels,
                  [r for t in stream for r in t.train],
                  [r for t in stream for r in t.val],
                  [r for t in stream for r in t.test])
    return TaskStream([merged], stream.dataset)


def run_joint(stream: TaskStream, config: LearnerConfig, seed: int) -> RunReport:
    cfg = replace(config, buffer_fraction=0.0,
                  method={"vag+er": "vag", "er": "vanilla-classifier"}.get(config.method, config.method))
    report = run_single(joint_stream(stream), cfg, seed)
    report.method = f"{config.method} (joint)"
    return report
