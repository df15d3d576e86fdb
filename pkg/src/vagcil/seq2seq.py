"""A small pre-LayerNorm encoder-decoder transformer on top of :mod:`vagcil.tensor`.

Input and output embeddings are untied: ``tok_emb`` feeds encoder and decoder
inputs, ``out_emb`` (the matrix ``E``) scores the next token as
``s_w = E_w . f_dec(z, prefix)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, OutOfVocabularyError
from .tensor import Tensor

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
MAX_INPUT_LEN = 128


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """Token string <-> id map with reserved ids 0..3 (PAD, BOS, EOS, UNK)."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {s: i for i, s in enumerate(SPECIALS)}
        for tok in tokens:
            self.add(tok)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        """Vocabulary over all whitespace tokens of ``texts``, in first-seen order."""
        vocab = cls()
        for text in texts:
            for tok in tokenize(text):
                vocab.add(tok)
        return vocab

    def add(self, token: str) -> int:
        token = token.lower()
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token.lower() in self.stoi

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(tok, UNK) for tok in tokenize(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.itos[i] for i in ids if i not in (PAD, BOS, EOS))

    def content_ids(self) -> range:
        return range(len(SPECIALS), len(self.itos))

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()[:16]


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 256
    max_input_len: int = MAX_INPUT_LEN
    max_target_len: int = 32
    init_std: float = 0.02
    dtype: str = "float32"

    def validate(self) -> None:
        for name in ("d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff",
                     "max_input_len", "max_target_len"):
            if getattr(self, name) <= 0:
                raise ContractError(f"model config field {name} must be positive")
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        if self.init_std <= 0:
            raise ContractError("init_std must be positive")


@dataclass
class Seq2SeqModel:
    config: ModelConfig
    vocab: Vocabulary
    params: dict[str, Tensor]
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = v.copy()

    def clone(self) -> "Seq2SeqModel":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return Seq2SeqModel(self.config, self.vocab, params, self.seed, dict(self.extra))

    def with_params(self, **replacements: Tensor) -> "Seq2SeqModel":
        """Shallow copy sharing all parameters except ``replacements``."""
        params = dict(self.params)
        params.update(replacements)
        return Seq2SeqModel(self.config, self.vocab, params, self.seed, self.extra)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _param_shapes(cfg: ModelConfig, V: int) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (V, d),
        "out_emb": (V, d),
        "enc_pos": (cfg.max_input_len, d),
        "dec_pos": (cfg.max_target_len, d),
    }

    def attn(prefix):
        # no key bias: it shifts every score in a row equally and softmax ignores it
        for m in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w{m}"] = (d, d)
            if m != "k":
                shapes[f"{prefix}.b{m}"] = (d,)

    def ln(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for i in range(cfg.n_enc_layers):
        p = f"enc{i}"
        ln(f"{p}.ln1"), attn(f"{p}.self"), ln(f"{p}.ln2"), ffn(f"{p}.ffn")
    ln("enc_ln")
    for i in range(cfg.n_dec_layers):
        p = f"dec{i}"
        ln(f"{p}.ln1"), attn(f"{p}.self"), ln(f"{p}.ln2"), attn(f"{p}.cross")
        ln(f"{p}.ln3"), ffn(f"{p}.ffn")
    ln("dec_ln")
    return shapes


def init_model(config: ModelConfig, vocab: Vocabulary, seed: int) -> Seq2SeqModel:
    """Fresh model: weights ~ N(0, init_std), biases 0, LayerNorm gains 1."""
    config.validate()
    if len(vocab) <= len(SPECIALS):
        raise ContractError("vocabulary has no content tokens")
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape in _param_shapes(config, len(vocab)).items():
        leaf = name.rsplit(".", 1)[-1]
        is_ln = ".ln" in name or name.startswith(("enc_ln", "dec_ln"))
        if is_ln and leaf == "g":
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, config.init_std, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return Seq2SeqModel(config, vocab, params, seed)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a ``(B, n)`` id array plus a boolean validity mask."""
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def _truncate(model: Seq2SeqModel, seq: Sequence[int]) -> list[int]:
    seq = list(seq)
    if not seq:
        raise ContractError("cannot encode an empty input sequence")
    limit = model.config.max_input_len
    if len(seq) > limit:
        warnings.warn(f"input of {len(seq)} tokens truncated to {limit}", stacklevel=3)
        seq = seq[:limit]
    return seq


def _check_ids(model: Seq2SeqModel, ids: np.ndarray) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= model.vocab_size):
        raise OutOfVocabularyError(f"token id outside vocabulary of size {model.vocab_size}")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def _ln(model, prefix, x):
    p = model.params
    return T.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def _linear(x, w, b):
    return x @ w + b


def _attention(model, prefix, xq, xkv, allowed):
    """Multi-head attention; ``allowed`` is a bool array broadcastable to (B,h,n,m)."""
    p = model.params
    B, n, d = xq.shape
    m = xkv.shape[1]
    h = model.config.n_heads
    dh = d // h
    q = _linear(xq, p[f"{prefix}.wq"], p[f"{prefix}.bq"]).reshape(B, n, h, dh).transpose(0, 2, 1, 3)
    k = (xkv @ p[f"{prefix}.wk"]).reshape(B, m, h, dh).transpose(0, 2, 3, 1)
    v = _linear(xkv, p[f"{prefix}.wv"], p[f"{prefix}.bv"]).reshape(B, m, h, dh).transpose(0, 2, 1, 3)
    scores = (q @ k) * (1.0 / np.sqrt(dh))
    weights = T.softmax(scores, mask=allowed)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
    return _linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _ffn(model, prefix, x):
    p = model.params
    hdn = T.gelu(_linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return _linear(hdn, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def encode_batch(model: Seq2SeqModel, ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """Encoder states ``(B, n, d)`` for padded ``ids``."""
    _check_ids(model, ids)
    p = model.params
    n = ids.shape[1]
    x = T.gather_rows(p["tok_emb"], ids) + T.gather_rows(p["enc_pos"], np.arange(n))
    allowed = mask[:, None, None, :]
    for i in range(model.config.n_enc_layers):
        x = x + _self_block(model, f"enc{i}", x, allowed)
        x = x + _ffn(model, f"enc{i}.ffn", _ln(model, f"enc{i}.ln2", x))
    return _ln(model, "enc_ln", x)


def _self_block(model, prefix, x, allowed):
    hx = _ln(model, f"{prefix}.ln1", x)
    return _attention(model, f"{prefix}.self", hx, hx, allowed)


def pool(memory: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of encoder states over valid positions: ``(B, d)``."""
    w = (mask / mask.sum(axis=1, keepdims=True)).astype(memory.dtype)
    return (memory * w[:, :, None]).sum(axis=1)


def decode_hidden(
    model: Seq2SeqModel,
    memory: Tensor,
    src_mask: np.ndarray,
    dec_ids: np.ndarray,
    dec_mask: np.ndarray | None = None,
) -> Tensor:
    """Final decoder states ``f_dec`` for every prefix position: ``(B, m, d)``."""
    _check_ids(model, dec_ids)
    p = model.params
    m = dec_ids.shape[1]
    if m > model.config.max_target_len:
        raise ContractError(f"decoder prefix of length {m} exceeds max_target_len {model.config.max_target_len}")
    if dec_mask is None:
        dec_mask = np.ones(dec_ids.shape, dtype=bool)
    causal = np.tril(np.ones((m, m), dtype=bool))
    self_allowed = causal[None, None] & dec_mask[:, None, None, :]
    cross_allowed = src_mask[:, None, None, :]
    y = T.gather_rows(p["tok_emb"], dec_ids) + T.gather_rows(p["dec_pos"], np.arange(m))
    for i in range(model.config.n_dec_layers):
        y = y + _self_block(model, f"dec{i}", y, self_allowed)
        y = y + _attention(model, f"dec{i}.cross", _ln(model, f"dec{i}.ln2", y), memory, cross_allowed)
        y = y + _ffn(model, f"dec{i}.ffn", _ln(model, f"dec{i}.ln3", y))
    return _ln(model, "dec_ln", y)


def output_logits(model: Seq2SeqModel, hidden: Tensor) -> Tensor:
    """``s_w = E_w . h`` for every vocabulary token."""
    return hidden @ T.swap_last(model.params["out_emb"])


# ---------------------------------------------------------------------------
# Single-example API
# ---------------------------------------------------------------------------


def encode(model: Seq2SeqModel, input_ids: Sequence[int]) -> Tensor:
    """Per-position encoder memory ``(n, d)`` for one input."""
    seq = _truncate(model, input_ids)
    ids, mask = pad_batch([seq])
    mem = encode_batch(model, ids, mask)
    return mem.reshape(mem.shape[1:])


def decoder_logits(model: Seq2SeqModel, memory: Tensor, prefix: Sequence[int]) -> Tensor:
    """Pre-softmax next-token scores ``(|V|,)`` given ``memory`` ``(n, d)`` and a BOS-led prefix."""
    prefix = list(prefix)
    if not prefix or prefix[0] != BOS:
        raise ContractError("decoder prefix must begin with BOS")
    n, d = memory.shape
    mem = memory.reshape(1, n, d)
    src_mask = np.ones((1, n), dtype=bool)
    hidden = decode_hidden(model, mem, src_mask, np.asarray([prefix]))
    last = hidden.reshape(len(prefix), d)
    logits = output_logits(model, last)
    return _row(logits, len(prefix) - 1)


def _row(x: Tensor, i: int) -> Tensor:
    sel = np.zeros(x.shape[0], dtype=x.dtype)
    sel[i] = 1.0
    return (Tensor(sel[None, :]) @ x).reshape(x.shape[1])


def greedy_decode_batch(
    model: Seq2SeqModel, inputs: Sequence[Sequence[int]], max_len: int = 8
) -> list[list[int]]:
    """Greedy decoding for a batch; EOS stops a row and is dropped from the output.

    PAD and BOS are never emitted. Ties resolve to the lowest token id
    (``np.argmax`` semantics).
    """
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    seqs = [_truncate(model, s) for s in inputs]
    ids, mask = pad_batch(seqs)
    memory = encode_batch(model, ids, mask)
    B = len(seqs)
    prefix = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    out: list[list[int]] = [[] for _ in range(B)]
    steps = min(max_len, model.config.max_target_len)
    for _ in range(steps):
        hidden = decode_hidden(model, memory, mask, prefix)
        last = hidden.data[:, -1, :]
        logits = last @ model.params["out_emb"].data.T
        logits[:, [PAD, BOS]] = -np.inf
        nxt = logits.argmax(axis=-1)
        for b in range(B):
            if not done[b]:
                if nxt[b] == EOS:
                    done[b] = True
                else:
                    out[b].append(int(nxt[b]))
        if done.all():
            break
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return out


def greedy_decode(model: Seq2SeqModel, input_ids: Sequence[int], max_len: int = 8) -> list[int]:
    return greedy_decode_batch(model, [input_ids], max_len)[0]


def sequence_features(model: Seq2SeqModel, inputs: Sequence[Sequence[int]], batch_size: int = 256) -> np.ndarray:
    """Mean-pooled encoder representation for each input, ``(N, d)``."""
    feats = []
    for start in range(0, len(inputs), batch_size):
        chunk = [_truncate(model, s) for s in inputs[start:start + batch_size]]
        ids, mask = pad_batch(chunk)
        feats.append(pool(encode_batch(model, ids, mask), mask).data)
    return np.concatenate(feats, axis=0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Seq2SeqModel, path: str | Path) -> None:
    """Write ``<path>`` (npz arrays) and ``<path>.json`` (manifest)."""
    path = Path(path)
    np.savez(path, **{k: v.data for k, v in model.params.items()})
    npz = path if path.suffix == ".npz" else path.with_name(path.name + ".npz")
    manifest = {
        "config": asdict(model.config),
        "vocab": model.vocab.itos,
        "vocab_hash": model.vocab.digest(),
        "seed": model.seed,
        "arrays": npz.name,
    }
    npz.with_suffix(".json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path: str | Path) -> Seq2SeqModel:
    path = Path(path)
    npz = path if path.suffix == ".npz" else path.with_name(path.name + ".npz")
    manifest = json.loads(npz.with_suffix(".json").read_text())
    vocab = Vocabulary(manifest["vocab"][len(SPECIALS):])
    if vocab.digest() != manifest["vocab_hash"]:
        raise ContractError("checkpoint vocabulary hash mismatch")
    with np.load(npz) as arrays:
        params = {k: Tensor(arrays[k].copy(), requires_grad=True) for k in arrays.files}
    return Seq2SeqModel(ModelConfig(**manifest["config"]), vocab, params, manifest["seed"])
