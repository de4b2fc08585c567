"""Greedy and beam-search caption generation with slot filling."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .attention import RegionFeatures
from .data import BOS, EOS, SceneRecord, Visual, Vocab
from .decoder import ModelConfig, initial_state, map_state, prepare, step_fn
from .grounding import ground, slot_choices
from .tensor import ParamStore


class Scorer(Protocol):
    """Per-scene scoring interface driven by the search routines.

    ``step`` takes a batch of n hypothesis states and their last tokens and
    returns the new states, log P_full as an (n, S+K) array, and the slot
    filler of every region as an (n, K, 3) int array of (word, plural, subcat).
    """

    n_textual: int
    eos: int
    bos: int

    def initial(self): ...

    def step(self, state, tokens: np.ndarray): ...

    def select(self, state, rows: np.ndarray): ...


class ModelScorer:
    def __init__(self, params: ParamStore, cfg: ModelConfig, vocab: Vocab, record: SceneRecord):
        self.params, self.cfg, self.vocab = params, cfg, vocab
        self.regions = RegionFeatures.single(record.features, record.conv_features, cfg.np_dtype)
        self.n_textual = vocab.n_textual
        self.eos, self.bos = vocab.id(EOS), vocab.id(BOS)
        self._step = step_fn(cfg)
        self._caches: dict[int, tuple] = {}
        self._sub_words = vocab.subcat_words
        self._slot_words = vocab.slot_words

    def _replicated(self, n: int):
        if n not in self._caches:
            regions = self.regions.select(np.zeros(n, np.intp))
            self._caches[n] = (regions, prepare(regions, self.params, self.cfg))
        return self._caches[n]

    def initial(self):
        return initial_state(self.cfg, 1)

    def step(self, state, tokens):
        tokens = np.asarray(tokens, dtype=np.intp)
        n = tokens.shape[0]
        regions, cache = self._replicated(n)
        with T.no_grad():
            out = self._step(state, tokens, regions, self.params, self.cfg, False, None, cache)
            g = ground(out, regions, self.params, np.zeros(n, np.intp), self._sub_words, cache)
            logp = g.log_full.data.astype(np.float64)
            plural, subcat = slot_choices(out, regions, self.params, self._sub_words)
        words = self._slot_words[subcat, plural]
        return out.state, logp, np.stack([words, plural, subcat], axis=-1)

    def select(self, state, rows):
        rows = np.asarray(rows, dtype=np.intp)
        return map_state(state, lambda t: T.Tensor(t.data[rows]))


@dataclass
class CaptionHypothesis:
    tokens: list[int] = field(default_factory=list)
    grounding: list[Visual | None] = field(default_factory=list)
    logprob: float = 0.0
    finished: bool = False
    entries: tuple = ()  # chosen columns of the full word distribution, EOS included

    def words(self, vocab: Vocab) -> list[str]:
        return [vocab.token(t) for t in self.tokens]

    def render(self, vocab: Vocab) -> str:
        """Caption text with grounded words in brackets, e.g. ``a [cat] on a [couch]``."""
        return " ".join(f"[{vocab.token(t)}]" if g is not None else vocab.token(t)
                        for t, g in zip(self.tokens, self.grounding))


def _expand(hyp: CaptionHypothesis, j: int, logp: float, slots: np.ndarray, S: int, eos: int):
    """Child of ``hyp`` choosing column j; returns (child, next input token)."""
    tokens, grounding = list(hyp.tokens), list(hyp.grounding)
    token = j
    if j == eos:
        pass
    elif j < S:
        tokens.append(j)
        grounding.append(None)
    else:
        word, plural, subcat = (int(x) for x in slots[j - S])
        tokens.append(word)
        grounding.append(Visual(j - S, plural, subcat))
        token = word
    child = CaptionHypothesis(tokens, grounding, hyp.logprob + logp, j == eos, hyp.entries + (j,))
    return child, token


def greedy_decode(scorer: Scorer, max_len: int = 20) -> CaptionHypothesis:
    state = scorer.initial()
    hyp = CaptionHypothesis()
    token = scorer.bos
    for _ in range(max_len):
        state, logp, slots = scorer.step(state, np.array([token]))
        j = int(np.argmax(logp[0]))
        hyp, token = _expand(hyp, j, float(logp[0, j]), slots[0], scorer.n_textual, scorer.eos)
        if hyp.finished:
            return hyp
    hyp.finished = True
    return hyp


def _rank_key(parent: CaptionHypothesis, logp: float, j: int):
    # ties on the running score fall back to the prefix, then the local
    # log-prob, then the column index
    return (-(parent.logprob + logp), parent.entries, -logp, j)


def beam_search(scorer: Scorer, beam: int = 3, max_len: int = 20) -> CaptionHypothesis:
    """Length-unnormalised beam search over the full word distribution.

    Each step keeps the ``beam`` best children of all live hypotheses; children
    that emit EOS or reach ``max_len`` are closed. Stops once no live
    hypothesis can beat the best closed one.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    state = scorer.initial()
    live = [CaptionHypothesis()]
    tokens = np.array([scorer.bos])
    done: list[CaptionHypothesis] = []
    for t in range(max_len):
        state, logp, slots = scorer.step(state, tokens)
        cands = []
        for row, hyp in enumerate(live):
            for j in range(logp.shape[1]):
                lp = float(logp[row, j])
                if lp == -np.inf:
                    continue
                cands.append((_rank_key(hyp, lp, j), row, j, lp))
        cands.sort(key=lambda c: c[0])
        next_live, rows, next_tokens = [], [], []
        for _, row, j, lp in cands[:beam]:
            child, token = _expand(live[row], j, lp, slots[row], scorer.n_textual, scorer.eos)
            if not child.finished and t == max_len - 1:
                child.finished = True
            if child.finished:
                done.append(child)
            else:
                next_live.append(child)
                rows.append(row)
                next_tokens.append(token)
        if not next_live:
            break
        best_done = max((h.logprob for h in done), default=-np.inf)
        if best_done > max(h.logprob for h in next_live):
            break
        live = next_live
        state = scorer.select(state, rows)
        tokens = np.array(next_tokens)
    return min(done, key=lambda h: (-h.logprob, h.entries))


def generate(params: ParamStore, cfg: ModelConfig, vocab: Vocab, records: Sequence[SceneRecord], beam: int = 3,
             max_len: int = 20, workers: int = 1) -> list[CaptionHypothesis]:
    """Caption every scene; results keep the order of ``records``."""
    def one(rec):
        scorer = ModelScorer(params, cfg, vocab, rec)
        return beam_search(scorer, beam, max_len)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, records))
    return [one(r) for r in records]


def grounding_accuracy(hypotheses: Sequence[CaptionHypothesis], records: Sequence[SceneRecord]) -> float:
    """Share of annotated visual tokens whose positional counterpart among the
    generated visual tokens points at the same region."""
    if len(hypotheses) != len(records):
        raise ValueError("hypotheses and records are not aligned")
    total = correct = 0
    for hyp, rec in zip(hypotheses, records):
        truth = [g for g in rec.grounding if g is not None]
        made = [g for g in hyp.grounding if g is not None]
        total += len(truth)
        correct += sum(1 for i, g in enumerate(truth) if i < len(made) and made[i].region == g.region)
    return correct / total if total else 0.0
