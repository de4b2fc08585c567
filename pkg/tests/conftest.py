import math

import numpy as np
import pytest

from ntt.attention import RegionFeatures
from ntt.data import build_vocab, gen_corpus
from ntt.decoder import ModelConfig, init_params


def small_config(kind="twin", **kw):
    base = dict(kind=kind, n_vocab=20, n_textual=12, n_subcats=5, d_v=6, hidden=8, embed=8, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def random_regions(rng, batch=2, K=3, d_v=6, ragged=False):
    V = rng.normal(size=(batch, K, d_v))
    Vbar = rng.normal(size=(batch, K, d_v))
    mask = np.ones((batch, K), bool)
    if ragged and K > 1:
        mask[0, K - 1] = False
        V[0, K - 1] = Vbar[0, K - 1] = 0.0
    from ntt.tensor import Tensor
    return RegionFeatures(Tensor(V), Tensor(Vbar), mask)


def scaled_params(cfg, seed=0, scale=0.5):
    """Parameters with a larger spread than the default init, so gradients are well away from zero."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    for p in params.values():
        p.data[...] = rng.uniform(-scale, scale, p.shape)
    return params


class TableScorer:
    """Scorer driven by a function from the prefix of chosen columns to a distribution.

    Region k emits the word S + k, so every emitted token names its column.
    """

    bos = -1

    def __init__(self, dist, S, K, eos=1):
        self.dist, self.n_textual, self.K, self.eos = dist, S, K, eos

    def initial(self):
        return [()]

    def step(self, state, tokens):
        prefixes = [p if t == self.bos else p + (int(t),) for p, t in zip(state, tokens)]
        with np.errstate(divide="ignore"):
            logp = np.log(np.array([self.dist(p) for p in prefixes], dtype=float))
        slots = np.array([[[self.n_textual + k, 0, k] for k in range(self.K)]] * len(prefixes), dtype=int)
        return prefixes, logp, slots.reshape(len(prefixes), self.K, 3)

    def select(self, state, rows):
        return [state[r] for r in rows]


def brute_force(scorer, max_len):
    n = scorer.n_textual + scorer.K
    best = (-math.inf, ())
    stack = [((), 0.0)]
    while stack:
        prefix, score = stack.pop()
        probs = scorer.dist(prefix)
        for j in range(n):
            if probs[j] == 0:
                continue
            s = score + math.log(probs[j])
            seq = prefix + (j,)
            if j == scorer.eos or len(seq) == max_len:
                if (s, tuple(-x for x in seq)) > (best[0], tuple(-x for x in best[1])):
                    best = (s, seq)
            else:
                stack.append((seq, s))
    return best


def random_table(seed, n):
    cache = {}

    def dist(prefix):
        if prefix not in cache:
            r = np.random.default_rng([seed, len(prefix)] + list(prefix))
            p = r.dirichlet(np.full(n, 0.7))
            cache[prefix] = p
        return cache[prefix]

    return dist


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus():
    records = gen_corpus(11, 40)
    return records, build_vocab(records)


# acceptance lines are collected here and echoed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
