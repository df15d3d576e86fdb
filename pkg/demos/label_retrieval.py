"""
Snapping generated text to the label pool
=========================================

Generated label text is mapped to the closest known label by cosine
similarity of mean token vectors, so predictions never leave the pool.
"""

from vagcil.label_pool import FrozenEmbedder, LabelPool
from vagcil.seq2seq import Vocabulary

words = "transfer money card lost stolen refund balance check account open close freeze pin change"
vocab = Vocabulary.build([words])
pool = LabelPool(FrozenEmbedder(vocab, seed=0))

pool.add_labels(["transfer money", "card lost", "card stolen"], task_id=1)
pool.add_labels(["check balance", "open account", "card lost"], task_id=2)  # a repeat is ignored
print(len(pool), "labels:", pool.labels)

for generated in ["card lost", "stolen card", "money transfer", "freeze card", "account", ""]:
    entry, score = pool.retrieve(vocab.encode(generated))
    print(f"{generated!r:>18} -> {entry.text!r:<18} cosine {score:+.3f}")

# the empty generation falls back to the first entry and is counted
print("fallbacks:", pool.fallback_events)
