"""Corpus BLEU, CIDEr and the model comparison report."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _as_multi(references):
    # accept one reference per item or a list of references per item
    out = []
    for refs in references:
        if refs and isinstance(refs[0], str):
            out.append([list(refs)])
        else:
            out.append([list(r) for r in refs])
    return out


def bleu(candidates: Sequence[Sequence[str]], references, n: int = 4) -> float:
    """Corpus BLEU-n: clipped n-gram precisions, geometric mean, brevity penalty. No smoothing."""
    refs = _as_multi(references)
    if not candidates or len(candidates) != len(refs):
        raise ValueError("bleu needs non-empty, aligned candidate and reference corpora")
    matched = [0] * n
    total = [0] * n
    cand_len = ref_len = 0
    for cand, rs in zip(candidates, refs):
        cand_len += len(cand)
        # closest reference length, shorter wins ties
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in rs)[1]
        for k in range(1, n + 1):
            counts = ngrams(cand, k)
            max_ref = Counter()
            for r in rs:
                max_ref |= ngrams(r, k)
            matched[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[k - 1] += sum(counts.values())
    if cand_len == 0 or min(matched) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


def cider(candidates: Sequence[Sequence[str]], references, n: int = 4) -> float:
    """Corpus CIDEr: per item, the mean over n-gram orders 1..n of the average
    tf-idf cosine similarity to each reference, times 10; then the corpus mean.

    Document frequencies come from the references; ``idf = log(N / max(1, df))``.
    """
    refs = _as_multi(references)
    if len(candidates) != len(refs):
        raise ValueError("candidates and references are not aligned")
    N = len(refs)
    if N < 2:
        raise ValueError("CIDEr needs at least 2 items for document frequencies; use bleu() for a single caption")
    df = [Counter() for _ in range(n)]
    for rs in refs:
        for k in range(1, n + 1):
            seen = set()
            for r in rs:
                seen |= set(ngrams(r, k))
            df[k - 1].update(seen)
    log_n = math.log(N)

    def vec(tokens, k):
        counts = ngrams(tokens, k)
        return {g: c * (log_n - math.log(max(1, df[k - 1][g]))) for g, c in counts.items()}

    def cos(a, b):
        na = math.sqrt(sum(v * v for v in a.values()))
        nb = math.sqrt(sum(v * v for v in b.values()))
        if na == 0.0 or nb == 0.0:
            return 0.0
        return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)

    scores = []
    for cand, rs in zip(candidates, refs):
        per_n = []
        for k in range(1, n + 1):
            c = vec(cand, k)
            per_n.append(float(np.mean([cos(c, vec(r, k)) for r in rs])))
        scores.append(10.0 * float(np.mean(per_n)))
    return float(np.mean(scores))


@dataclass
class EvalRow:
    model: str
    bleu1: float
    bleu4: float
    cider: float
    extra: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    """Rows of (model, BLEU1, BLEU4, CIDEr) with metrics as fractions; rendered x100."""

    split: str
    corpus_size: int
    rows: list[EvalRow] = field(default_factory=list)

    COLUMNS = ("Model", "BLEU1", "BLEU4", "CIDEr")

    def render(self) -> str:
        cells = [self.COLUMNS] + [(r.model, f"{100 * r.bleu1:.2f}", f"{100 * r.bleu4:.2f}", f"{100 * r.cider:.2f}")
                                  for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(self.COLUMNS))]
        lines = [f"Results on the {self.split} split ({self.corpus_size} scenes)"]
        for row in cells:
            first = row[0].ljust(widths[0])
            rest = "  ".join(c.rjust(w) for c, w in zip(row[1:], widths[1:]))
            lines.append(f"{first}  {rest}")
        return "\n".join(lines) + "\n"

    def to_records(self) -> str:
        out = []
        for r in self.rows:
            obj = {"split": self.split, "corpus_size": self.corpus_size, "model": r.model,
                   "bleu1": r.bleu1, "bleu4": r.bleu4, "cider": r.cider}
            obj.update(r.extra)
            out.append(json.dumps(obj, sort_keys=False))
        return "".join(line + "\n" for line in out)


def score_captions(model: str, candidates: Sequence[Sequence[str]], references, **extra) -> EvalRow:
    return EvalRow(model, bleu(candidates, references, 1), bleu(candidates, references, 4),
                   cider(candidates, references), dict(extra))


def eval_report(models, split: str, records, beam: int = 3, max_len: int = 20, workers: int = 1) -> EvalReport:
    """Caption ``records`` with each ``(name, params, model_cfg, vocab)`` and score against the annotations."""
    from .inference import generate, grounding_accuracy

    report = EvalReport(split, len(records))
    references = [r.tokens for r in records]
    for name, params, cfg, vocab in models:
        hyps = generate(params, cfg, vocab, records, beam, max_len, workers)
        cands = [h.words(vocab) for h in hyps]
        report.rows.append(score_captions(name, cands, references,
                                          grounding_accuracy=grounding_accuracy(hyps, records)))
    return report
