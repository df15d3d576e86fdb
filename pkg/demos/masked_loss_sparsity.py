"""
Restricting the softmax to a task vocabulary
============================================

A generation loss whose normalizer only covers the tokens of the current
task's labels leaves every other output-embedding row untouched.
"""

import numpy as np

from vagcil.objective import Sample, nll_loss, task_vocab
from vagcil.seq2seq import EOS, ModelConfig, Vocabulary, init_model
from vagcil.tensor import Tape

vocab = Vocabulary.build(["transfer money card lost stolen refund balance check account open close"])
cfg = ModelConfig(d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=32, dtype="float64")
model = init_model(cfg, vocab, seed=0)

# two classes of the current task
labels = ["card lost", "card stolen"]
tv = task_vocab(labels, vocab, task_id=2)
print("task vocabulary:", sorted(vocab.itos[i] for i in tv.token_ids))

batch = [
    Sample(tuple(vocab.encode("i lost my card")), tuple(vocab.encode("card lost")) + (EOS,), tv),
    Sample(tuple(vocab.encode("someone stole it")), tuple(vocab.encode("card stolen")) + (EOS,), tv),
]

# %%
# Gradient of the output embedding under both losses

for masked in (False, True):
    model.zero_grad()
    with Tape() as tape:
        loss = nll_loss(model, batch, masked=masked)
    tape.backward(loss.total)
    rows = np.abs(model.params["out_emb"].grad).sum(axis=1)
    touched = [vocab.itos[i] for i in np.flatnonzero(rows)]
    print(f"masked={masked}: loss {loss.value:.4f}, rows with gradient: {len(touched)}")
    if masked:
        print("   ", touched)

# %%
# The restricted loss is never larger: dropping competitors from the
# normalizer can only raise the target's probability.
plain = nll_loss(model, batch).value
restricted = nll_loss(model, batch, masked=True).value
print(f"unrestricted {plain:.4f} >= restricted {restricted:.4f}")
