"""
BLEU, CIDEr and the comparison table
====================================

Corpus-level scores computed by hand-checkable code, and the table format
the ``eval`` command writes.
"""

from ntt import bleu, cider
from ntt.metrics import EvalReport, score_captions

refs = [s.split() for s in ("a cat sitting near a couch", "some buses parked beside some trees",
                            "a donut served with a plate")]
cands = [s.split() for s in ("a cat sitting near a bed", "some buses parked beside some trees",
                             "a donut served")]

print(f"BLEU1 {bleu(cands, refs, 1):.4f}  BLEU4 {bleu(cands, refs, 4):.4f}  CIDEr {cider(cands, refs):.4f}")

# clipping: "the" is credited at most as often as it occurs in the reference
print("clipped BLEU1:", bleu([["the"] * 4], [["the", "cat"]], 1))

###############################################################################
# A report renders metrics times 100.

report = EvalReport("test", len(refs))
report.rows.append(score_captions("NTT", cands, refs))
report.rows.append(score_captions("NBT", refs, refs))
print(report.render())
