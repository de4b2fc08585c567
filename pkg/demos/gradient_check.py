"""
Checking gradients by finite differences
========================================

The decoder runs on a small reverse-mode autograd engine. Here we push one
twin decoder step through the grounding head, backpropagate a scalar, and
compare every parameter gradient with a central difference quotient.
"""

import numpy as np

from ntt import ModelConfig, RegionFeatures, Tensor, finite_diff_check, ground, init_params, initial_state
from ntt import tensor as T
from ntt.decoder import decoder_step

cfg = ModelConfig(kind="twin", n_vocab=20, n_textual=12, n_subcats=5, d_v=6, hidden=8, embed=8, dtype="float64")
params = init_params(cfg, seed=0)
print(f"{len(params)} parameter tensors, {params.num_params()} entries")

rng = np.random.default_rng(1)
regions = RegionFeatures.single(rng.normal(size=(3, 6)), rng.normal(size=(3, 6)))
weights = rng.normal(size=(1, 12 + 3))

###############################################################################
# The objective: a random linear functional of log P over words and regions.

def objective(p):
    out = decoder_step(initial_state(cfg, 1), np.array([0]), regions, p, cfg)
    g = ground(out, regions, p, np.array([1]), np.arange(12, 17))
    return T.sum(g.log_full * Tensor(weights))

###############################################################################
# Round-off in f limits the quotient, so a step of 1e-4 to 3e-4 is a safer
# choice than 1e-6 once the objective is more than a few units in size.

report = finite_diff_check(objective, params, epsilon=3e-4, tolerance=1e-4)
print(report.summary())
