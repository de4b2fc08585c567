"""
Toy scenes and the cascaded gates
=================================

Every scene is a handful of region feature vectors plus a template caption
whose object words point back at regions. We look at a few, then run one
untrained decoder step and inspect the three adaptive gates.
"""

import numpy as np

from ntt import RegionFeatures, TrainConfig, build_vocab, gen_corpus, init_params, initial_state, model_config_for
from ntt.decoder import decoder_step

records = gen_corpus(seed=0, n_scenes=200)
vocab = build_vocab(records)
print(f"{len(records)} scenes, vocabulary of {len(vocab)} ({vocab.n_textual} textual tokens)")

for r in records[:4]:
    marked = " ".join(f"{w}<{g.region}>" if g else w for w, g in zip(r.tokens, r.grounding))
    print(f"scene {r.id}: K={r.k}, categories {r.categories}")
    print(f"   {marked}")

###############################################################################
# Gate values. g2 adds g1 and g3 adds g2, so the ranges stack up to (0,1),
# (0,2) and (0,3).

mc = model_config_for("twin", vocab, records[0].features.shape[1], TrainConfig(hidden=16, embed=16))
params = init_params(mc, seed=0)
r = records[0]
regions = RegionFeatures.single(r.features, r.conv_features, mc.np_dtype)
state = initial_state(mc, 1)
for t, word in enumerate(["<bos>"] + r.tokens[:3]):
    out = decoder_step(state, np.array([vocab.id(word)]), regions, params, mc)
    g1, g2, g3 = (g.data[0] for g in (out.gates.g1, out.gates.g2, out.gates.g3))
    print(f"t={t} after {word!r:10s} mean g1 {g1.mean():.3f}  g2 {g2.mean():.3f}  g3 {g3.mean():.3f}")
    state = out.state
