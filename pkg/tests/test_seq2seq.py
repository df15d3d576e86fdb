import math
import warnings

import numpy as np
import pytest

from conftest import TINY, randomize
from vagcil import tensor as T
from vagcil.errors import ContractError
from vagcil.objective import Sample, nll_loss
from vagcil.optim import AdamW
from vagcil.seq2seq import (
    BOS,
    EOS,
    PAD,
    UNK,
    ModelConfig,
    Vocabulary,
    decode_hidden,
    decoder_logits,
    encode,
    greedy_decode,
    greedy_decode_batch,
    init_model,
    load_checkpoint,
    save_checkpoint,
    sequence_features,
)
from vagcil.tensor import Tape, Tensor


def test_vocabulary_reserved_ids_and_tokenization(vocab):
    assert [vocab.itos[i] for i in (PAD, BOS, EOS, UNK)] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert vocab.encode("Transfer  MONEY") == [vocab.stoi["transfer"], vocab.stoi["money"]]
    assert vocab.encode("nonsense") == [UNK]
    assert sorted(vocab.stoi.values()) == list(range(len(vocab)))


def test_init_is_reproducible_per_seed(vocab):
    a, b, c = (init_model(TINY, vocab, s) for s in (3, 3, 4))
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)
    assert a.params["out_emb"].data.std() == pytest.approx(0.02, rel=0.3)


def test_zero_dimension_config_rejected(vocab):
    with pytest.raises(ContractError):
        init_model(ModelConfig(d_model=0), vocab, 0)


def test_untied_embeddings_and_output_rows(tiny_model, vocab):
    p = tiny_model.params
    assert p["out_emb"].shape[0] == len(vocab)
    assert p["tok_emb"] is not p["out_emb"]


def param_count_formula(cfg: ModelConfig, V: int) -> int:
    d, f = cfg.d_model, cfg.d_ff
    attn = 4 * d * d + 3 * d  # q, k, v, o weights; q, v, o biases
    ln = 2 * d
    ffn = 2 * d * f + f + d
    enc = 2 * ln + attn + ffn
    dec = 3 * ln + 2 * attn + ffn
    emb = 2 * V * d + (cfg.max_input_len + cfg.max_target_len) * d
    return emb + cfg.n_enc_layers * enc + cfg.n_dec_layers * dec + 2 * ln


def test_parameter_count_matches_formula(vocab):
    cfg = ModelConfig()
    model = init_model(cfg, vocab, 0)
    assert model.n_parameters() == param_count_formula(cfg, len(vocab))


def test_encode_shape_determinism_and_position_sensitivity(vocab):
    cfg = ModelConfig(d_model=32, n_heads=4, dtype="float64")
    model = randomize(init_model(cfg, vocab, 1), seed=1, scale=0.3)
    ids = vocab.encode("transfer money card lost stolen refund balance")
    mem = encode(model, ids)
    assert mem.shape == (7, 32)
    assert np.array_equal(mem.data, encode(model, ids).data)
    swapped = [ids[1], ids[0]] + ids[2:]
    assert not np.allclose(mem.data, encode(model, swapped).data)


def test_encode_contracts(tiny_model):
    with pytest.raises(ContractError):
        encode(tiny_model, [])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        mem = encode(tiny_model, [5] * (TINY.max_input_len + 3))
    assert mem.shape[0] == TINY.max_input_len
    assert any("truncated" in str(w.message) for w in caught)


def test_decoder_logits_matches_scalar_next_token_oracle(tiny_model, vocab):
    model = randomize(tiny_model, seed=2)
    memory = encode(model, vocab.encode("card lost"))
    prefix = [BOS, vocab.stoi["card"]]
    logits = decoder_logits(model, memory, prefix).data
    probs = T.softmax_rows(Tensor(logits[None])).data[0]
    assert probs.sum() == pytest.approx(1.0, abs=1e-9)

    # independent evaluation: s_w = E_w . f_dec, then exp / sum exp in plain floats
    mem = memory.reshape(1, *memory.shape)
    f_dec = decode_hidden(model, mem, np.ones((1, memory.shape[0]), bool), np.array([prefix])).data[0, -1]
    E = model.params["out_emb"].data
    scores = [math.fsum(E[w, j] * f_dec[j] for j in range(len(f_dec))) for w in range(len(vocab))]
    top = max(scores)
    z = math.fsum(math.exp(s - top) for s in scores)
    oracle = [math.exp(s - top) / z for s in scores]
    np.testing.assert_allclose(probs, oracle, rtol=0, atol=1e-9)


def test_zero_output_embedding_gives_uniform(tiny_model, vocab):
    model = randomize(tiny_model, seed=3)
    model.params["out_emb"].data[:] = 0.0
    for text in ("card lost", "open account now"):
        mem = encode(model, vocab.encode(text))
        p = T.softmax_rows(Tensor(decoder_logits(model, mem, [BOS, 5, 6]).data[None])).data[0]
        np.testing.assert_allclose(p, 1.0 / len(vocab), atol=1e-12)


def test_decoder_prefix_contracts(tiny_model, vocab):
    mem = encode(tiny_model, vocab.encode("card"))
    with pytest.raises(ContractError):
        decoder_logits(tiny_model, mem, [5])
    with pytest.raises(ContractError):
        decoder_logits(tiny_model, mem, [BOS] + [5] * TINY.max_target_len)


def test_decoder_is_causal(tiny_model, vocab):
    model = randomize(tiny_model, seed=4)
    mem = encode(model, vocab.encode("freeze card")).reshape(1, -1, TINY.d_model)
    src = np.ones((1, mem.shape[1]), bool)
    a = np.array([[BOS, 5, 6, 7, 8]])
    b = a.copy()
    b[0, 3] = 9
    ha = decode_hidden(model, mem, src, a).data
    hb = decode_hidden(model, mem, src, b).data
    assert np.array_equal(ha[:, :3], hb[:, :3])
    assert not np.allclose(ha[:, 3:], hb[:, 3:])


def test_greedy_decode_eos_first_gives_empty(tiny_model, vocab):
    model = tiny_model
    model.params["out_emb"].data[:] = 0.0
    model.params["out_emb"].data[EOS] = 1.0
    model.params["dec_ln.b"].data[:] = 1.0
    assert greedy_decode(model, vocab.encode("card lost"), max_len=5) == []


def test_greedy_decode_is_deterministic_and_bounded(tiny_model, vocab):
    model = randomize(tiny_model, seed=5)
    x = vocab.encode("travel notice pin")
    out = greedy_decode(model, x, max_len=4)
    assert out == greedy_decode(model, x, max_len=4)
    assert len(out) <= 4 and EOS not in out and PAD not in out and BOS not in out
    assert greedy_decode_batch(model, [x, x], 4) == [out, out]


def test_greedy_ties_resolve_to_lowest_id(tiny_model, vocab):
    model = tiny_model
    model.params["out_emb"].data[:] = 0.0  # every token ties
    # with PAD/BOS excluded, EOS (id 2) is the lowest eligible id, so decoding stops at once
    assert greedy_decode(model, vocab.encode("card"), max_len=3) == []


def test_overfit_one_pair_generates_it(vocab):
    cfg = ModelConfig(d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=32,
                      max_input_len=16, max_target_len=8)
    model = init_model(cfg, vocab, 0)
    x = tuple(vocab.encode("i want to send cash to my friend"))
    y = tuple(vocab.encode("transfer money")) + (EOS,)
    opt = AdamW(model.params.values(), lr=1e-2)
    for _ in range(60):
        model.zero_grad()
        with Tape() as tape:
            loss = nll_loss(model, [Sample(x, y)]).total
        tape.backward(loss)
        opt.step()
    assert vocab.decode(greedy_decode(model, x, max_len=6)) == "transfer money"


def test_sequence_features_are_mean_pooled(tiny_model, vocab):
    model = randomize(tiny_model, seed=6)
    ids = [vocab.encode("card lost"), vocab.encode("open account now please")]
    feats = sequence_features(model, ids)
    assert feats.shape == (2, TINY.d_model)
    for row, x in zip(feats, ids):
        np.testing.assert_allclose(row, encode(model, x).data.mean(axis=0), atol=1e-12)


def test_checkpoint_round_trip_is_bitwise(tmp_path, tiny_model, vocab):
    model = randomize(tiny_model, seed=7)
    save_checkpoint(model, tmp_path / "ckpt")
    back = load_checkpoint(tmp_path / "ckpt")
    assert back.config == model.config and back.vocab.itos == vocab.itos and back.seed == model.seed
    for k, p in model.params.items():
        assert p.data.dtype == back.params[k].data.dtype
        assert np.array_equal(p.data, back.params[k].data)


def test_checkpoint_detects_vocab_tampering(tmp_path, tiny_model):
    import json

    save_checkpoint(tiny_model, tmp_path / "ckpt")
    manifest = tmp_path / "ckpt.json"
    data = json.loads(manifest.read_text())
    data["vocab"].append("extra")
    manifest.write_text(json.dumps(data))
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "ckpt")


def test_model_gradient_matches_finite_differences(tiny_model, vocab):
    model = randomize(tiny_model, seed=8, scale=0.3)
    samples = [Sample(tuple(vocab.encode("card lost now")), tuple(vocab.encode("card lost")) + (EOS,))]
    name = "dec0.cross.wq"

    def f(w):
        return nll_loss(model.with_params(**{name: w}), samples).total

    rng = np.random.default_rng(0)
    idx = rng.choice(model.params[name].data.size, size=12, replace=False)
    assert T.grad_check(f, model.params[name].data, indices=idx) < 1e-5
