"""Synthetic benchmarks, JSONL ingestion and class-incremental task splits."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .label_pool import read_token_vectors, write_token_vectors
from .seq2seq import MAX_INPUT_LEN, Vocabulary

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]


@dataclass(frozen=True)
class ExampleRecord:
    text: str
    label: str


@dataclass
class SyntheticSpec:
    n_classes: int = 20
    n_tasks: int = 5
    classes_per_task: int = 4
    n_train: int = 60
    n_val: int = 20
    n_test: int = 20
    bag_size: int = 8
    shared_tokens: int = 2
    vocab_size: int = 200  # filler (noise) tokens
    noise_rate: float = 0.1
    label_weight: float = 3.0  # sampling-weight multiplier for label tokens in the bag
    min_len: int = 8
    max_len: int = 20
    corpus_per_class: int = 20
    embed_dim: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.n_tasks * self.classes_per_task != self.n_classes:
            raise ConfigError(
                f"n_tasks x classes_per_task = {self.n_tasks} x {self.classes_per_task} "
                f"does not match n_classes = {self.n_classes}")
        if self.n_classes < 2 or self.n_train < 1 or self.n_test < 1 or self.n_val < 1:
            raise ConfigError("need >= 2 classes and >= 1 example per split")
        if not 0 <= self.shared_tokens <= 2:
            raise ConfigError("shared_tokens must be 0, 1 or 2")
        if self.bag_size < 5:
            raise ConfigError("bag_size must be >= 5")
        if self.label_weight <= 0:
            raise ConfigError("label_weight must be positive")
        if not 0 <= self.noise_rate < 1:
            raise ConfigError("noise_rate must be in [0, 1)")
        if not 1 <= self.min_len <= self.max_len <= MAX_INPUT_LEN:
            raise ConfigError("need 1 <= min_len <= max_len <= 128")


@dataclass
class ClassTemplate:
    label: str
    bag: list[str]
    weights: np.ndarray
    sibling: int | None = None


@dataclass
class Dataset:
    labels: list[str]
    train: list[ExampleRecord]
    val: list[ExampleRecord]
    test: list[ExampleRecord]
    corpus: list[str] = field(default_factory=list)
    token_vectors: dict[str, np.ndarray] | None = None

    def all_texts(self) -> Iterable[str]:
        for split in (self.train, self.val, self.test):
            for r in split:
                yield r.text
                yield r.label
        yield from self.corpus

    def vocabulary(self) -> Vocabulary:
        return Vocabulary.build(self.all_texts())


def _pseudo_words(n: int, rng: np.random.Generator, taken: set[str]) -> list[str]:
    words = []
    while len(words) < n:
        n_syl = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(n_syl))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def make_templates(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[list[ClassTemplate], list[str]]:
    """Class templates in sibling pairs (2j, 2j+1) plus the filler vocabulary.

    Siblings share their label head token and, with ``shared_tokens=2``, one
    more bag token.
    """
    taken: set[str] = set()
    templates: list[ClassTemplate] = []
    for c in range(0, spec.n_classes, 2):
        pair = [c, c + 1] if c + 1 < spec.n_classes else [c]
        head = _pseudo_words(1, rng, taken)[0] if spec.shared_tokens >= 1 else None
        extra = _pseudo_words(1, rng, taken)[0] if spec.shared_tokens >= 2 else None
        for k in pair:
            n_label = int(rng.integers(2, 4))
            own_head = head if (head is not None and len(pair) == 2) else _pseudo_words(1, rng, taken)[0]
            tail = _pseudo_words(n_label - 1, rng, taken)
            label_toks = [own_head] + tail
            shared = [extra] if (extra is not None and len(pair) == 2) else []
            n_fill = spec.bag_size - len(label_toks) - len(shared)
            bag = label_toks + shared + _pseudo_words(n_fill, rng, taken)
            weights = rng.gamma(2.0, size=len(bag))
            weights[: len(label_toks)] *= spec.label_weight
            sibling = (pair[1] if k == pair[0] else pair[0]) if len(pair) == 2 else None
            templates.append(ClassTemplate(" ".join(label_toks), bag, weights / weights.sum(), sibling))
    fillers = _pseudo_words(spec.vocab_size, rng, taken)
    return templates, fillers


def _sample_text(tpl: ClassTemplate, fillers: Sequence[str], spec: SyntheticSpec,
                 rng: np.random.Generator) -> str:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    noise = rng.random(n) < spec.noise_rate
    bag_draw = rng.choice(len(tpl.bag), size=n, p=tpl.weights)
    fill_draw = rng.integers(len(fillers), size=n)
    return " ".join(fillers[f] if z else tpl.bag[b] for z, b, f in zip(noise, bag_draw, fill_draw))


def _token_vectors(templates, fillers, spec, rng) -> dict[str, np.ndarray]:
    """Embedding file content in which tokens of one class bag cluster together."""
    d = spec.embed_dim
    centroids = rng.normal(size=(len(templates), d))
    owners: dict[str, list[int]] = {}
    for c, tpl in enumerate(templates):
        for tok in tpl.bag:
            owners.setdefault(tok, []).append(c)
    vectors = {}
    for tok, cs in owners.items():
        vectors[tok] = centroids[cs].mean(axis=0) + 0.5 * rng.normal(size=d)
    for tok in fillers:
        vectors[tok] = rng.normal(size=d)
    return vectors


def generate_synthetic(spec: SyntheticSpec, seed: int | None = None) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    templates, fillers = make_templates(spec, rng)
    train, val, test = [], [], []
    for tpl in templates:
        for split, n in ((train, spec.n_train), (val, spec.n_val), (test, spec.n_test)):
            split.extend(ExampleRecord(_sample_text(tpl, fillers, spec, rng), tpl.label) for _ in range(n))
    corpus = [_sample_text(tpl, fillers, spec, rng) for tpl in templates for _ in range(spec.corpus_per_class)]
    order = rng.permutation(len(corpus))
    corpus = [corpus[i] for i in order]
    vectors = _token_vectors(templates, fillers, spec, rng)
    return Dataset([t.label for t in templates], train, val, test, corpus, vectors)


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def ingest_jsonl(path: str | Path) -> list[ExampleRecord]:
    """Read ``{"text": ..., "label": ...}`` lines."""
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            text, label = obj["text"], obj["label"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ContractError(f"{path}:{lineno}: malformed record ({exc})") from exc
        if not isinstance(text, str) or not isinstance(label, str) or not label.strip():
            raise ContractError(f"{path}:{lineno}: text and label must be non-empty strings")
        records.append(ExampleRecord(text, label))
    return records


def emit_jsonl(records: Sequence[ExampleRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"text": r.text, "label": r.label}) + "\n")


def dataset_from_records(records: Sequence[ExampleRecord], seed: int = 0,
                         fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)) -> Dataset:
    """Stratified train/val/test split of a flat record list."""
    rng = np.random.default_rng(seed)
    labels: list[str] = []
    by_label: dict[str, list[ExampleRecord]] = {}
    for r in records:
        if r.label not in by_label:
            labels.append(r.label)
            by_label[r.label] = []
        by_label[r.label].append(r)
    train, val, test = [], [], []
    for lab in labels:
        items = by_label[lab]
        perm = rng.permutation(len(items))
        n_tr = max(1, int(round(fractions[0] * len(items))))
        n_va = int(round(fractions[1] * len(items)))
        for j, i in enumerate(perm):
            (train if j < n_tr else val if j < n_tr + n_va else test).append(items[i])
    return Dataset(labels, train, val, test)


def save_dataset(ds: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        emit_jsonl(getattr(ds, name), out / f"{name}.jsonl")
    (out / "labels.txt").write_text("\n".join(ds.labels) + "\n")
    if ds.corpus:
        (out / "corpus.txt").write_text("\n".join(ds.corpus) + "\n")
    if ds.token_vectors:
        toks = sorted(ds.token_vectors)
        write_token_vectors(out / "token_vectors.txt", toks, np.stack([ds.token_vectors[t] for t in toks]))


def load_dataset(in_dir: str | Path) -> Dataset:
    d = Path(in_dir)
    splits = {name: ingest_jsonl(d / f"{name}.jsonl") for name in ("train", "val", "test")}
    labels_file = d / "labels.txt"
    if labels_file.exists():
        labels = [l for l in labels_file.read_text().splitlines() if l]
    else:
        labels = list(dict.fromkeys(r.label for r in splits["train"]))
    corpus_file = d / "corpus.txt"
    corpus = [l for l in corpus_file.read_text().splitlines() if l] if corpus_file.exists() else []
    vec_file = d / "token_vectors.txt"
    vectors = None
    if vec_file.exists():
        vectors = read_token_vectors(vec_file)
    return Dataset(labels, splits["train"], splits["val"], splits["test"], corpus, vectors)


# ---------------------------------------------------------------------------
# Task streams
# ---------------------------------------------------------------------------


@dataclass
class Task:
    task_id: int
    labels: list[str]
    train: list[ExampleRecord]
    val: list[ExampleRecord]
    test: list[ExampleRecord]


@dataclass
class TaskStream:
    tasks: list[Task]
    dataset: Dataset | None = None

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def all_labels(self) -> list[str]:
        return [lab for t in self.tasks for lab in t.labels]

    def validate(self) -> None:
        seen: set[str] = set()
        for t in self.tasks:
            labs = set(t.labels)
            if labs & seen:
                raise ContractError(f"task {t.task_id} repeats classes {sorted(labs & seen)}")
            seen |= labs
            for split in (t.train, t.val, t.test):
                for r in split:
                    if r.label not in labs:
                        raise ContractError(f"task {t.task_id} holds an example of foreign class {r.label!r}")


def split_tasks(ds: Dataset, n_tasks: int, classes_per_task: int, seed: int = 0) -> TaskStream:
    """Shuffle classes with ``seed`` and deal them into ``n_tasks`` groups."""
    n_classes = len(ds.labels)
    if n_classes % n_tasks or n_classes // n_tasks != classes_per_task:
        if n_classes < n_tasks * classes_per_task:
            raise ConfigError(f"{n_classes} classes cannot fill {n_tasks} tasks of {classes_per_task}")
        raise ConfigError(
            f"{n_classes} classes are not divisible into {n_tasks} tasks of {classes_per_task}")
    order = np.random.default_rng(seed).permutation(n_classes)
    tasks = []
    for t in range(n_tasks):
        labs = [ds.labels[i] for i in order[t * classes_per_task:(t + 1) * classes_per_task]]
        keep = set(labs)
        tasks.append(Task(
            t + 1, labs,
            [r for r in ds.train if r.label in keep],
            [r for r in ds.val if r.label in keep],
            [r for r in ds.test if r.label in keep],
        ))
    stream = TaskStream(tasks, ds)
    stream.validate()
    return stream


def write_stream(stream: TaskStream, out_dir: str | Path) -> None:
    """Per-task ``task_XX_{train,val,test}.jsonl`` plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"tasks": []}
    for t in stream.tasks:
        files = {}
        for name in ("train", "val", "test"):
            fname = f"task_{t.task_id:02d}_{name}.jsonl"
            emit_jsonl(getattr(t, name), out / fname)
            files[name] = fname
        manifest["tasks"].append({"task_id": t.task_id, "labels": t.labels, "files": files})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def read_stream(in_dir: str | Path) -> TaskStream:
    d = Path(in_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    tasks = [
        Task(e["task_id"], e["labels"], *(ingest_jsonl(d / e["files"][n]) for n in ("train", "val", "test")))
        for e in manifest["tasks"]
    ]
    stream = TaskStream(tasks)
    stream.validate()
    return stream


def spec_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
