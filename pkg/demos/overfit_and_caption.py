"""
Memorising a small corpus
=========================

A quick sanity run: train the twin decoder on 32 scenes until it reproduces
their captions, then decode with beam search. Grounded words are printed in
brackets. Takes about half a minute.
"""

import time

from ntt import (TrainConfig, build_vocab, gen_corpus, generate, grounding_accuracy, model_config_for,
                 token_cross_entropy, train)

records = gen_corpus(seed=7, n_scenes=32)
vocab = build_vocab(records)

# a faster schedule than the library default; the default anneals too soon for 32 scenes
cfg = TrainConfig(epochs=120, batch_size=8, lr0=5e-3, anneal_every=50, hidden=32, embed=32, seed=0)
mc = model_config_for("twin", vocab, records[0].features.shape[1], cfg)

start = time.perf_counter()
result = train(records, vocab, mc, cfg,
               callback=lambda epoch, row: epoch % 20 == 0 and print(f"epoch {epoch:3d}  loss {row[2]:.4f}"))
print(f"trained in {time.perf_counter() - start:.0f}s")

###############################################################################
# Cross-entropy per token and how often the decoder points at the right region.

ce = token_cross_entropy(result.params, mc, records, vocab)
hyps = generate(result.params, mc, vocab, records, beam=3)
print(f"token cross-entropy {ce:.4f}, grounding accuracy {grounding_accuracy(hyps, records):.3f}")

for hyp, rec in list(zip(hyps, records))[:5]:
    print(f"  truth: {' '.join(rec.tokens)}")
    print(f"  model: {hyp.render(vocab)}")
