"""
The command line pipeline
=========================

``gen-data`` then ``train`` then ``eval``, driven in-process through
``run_cli`` so the demo runs anywhere. The same steps from a shell::

    ntt gen-data --seed 3 --n 120 --out data
    ntt train --model twin --data data --out twin.ckpt --epochs 25 --lr 5e-3 --anneal-every 50 --batch 8 --hidden 32
    ntt train --model baseline --data data --out base.ckpt --epochs 25 --lr 5e-3 --anneal-every 50 --batch 8 --hidden 32
    ntt eval --ckpts twin.ckpt,base.ckpt --data data --out report.txt
"""

import tempfile
from pathlib import Path

from ntt.cli import run_cli

root = Path(tempfile.mkdtemp(prefix="ntt-demo-"))
data = root / "data"
# short, fast schedule so the demo finishes in under a minute
fast = ["--epochs", "25", "--lr", "5e-3", "--anneal-every", "50", "--batch", "8", "--hidden", "32"]

steps = [
    ["gen-data", "--seed", "3", "--n", "120", "--out", str(data)],
    ["train", "--model", "twin", "--data", str(data), "--out", str(root / "twin.ckpt"), *fast],
    ["train", "--model", "baseline", "--data", str(data), "--out", str(root / "base.ckpt"), *fast],
    ["caption", "--ckpt", str(root / "twin.ckpt"), "--data", str(data / "test.jsonl"),
     "--out", str(root / "captions.jsonl")],
    ["eval", "--ckpts", f"{root / 'twin.ckpt'},{root / 'base.ckpt'}", "--data", str(data),
     "--out", str(root / "report.txt")],
]
for argv in steps:
    code = run_cli(argv)
    print(f"ntt {argv[0]:<9s} -> exit {code}")
    assert code == 0

print()
print((root / "report.txt").read_text())
print("first caption record:")
print((root / "captions.jsonl").read_text().splitlines()[0])
print("\nlog head:")
print("".join((root / "twin.ckpt.log").read_text().splitlines(keepends=True)[:3]))
print(f"outputs in {root}")
