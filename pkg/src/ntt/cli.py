"""Command line: ``ntt gen-data | train | caption | eval``.

Options may also come from ``--config FILE`` (``key=value`` per line, ``#``
comments, keys spelled like the long flags); flags given on the command line
win. Every output file is written to a temporary name and renamed on success.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

from .data import (CorpusConfig, SPLIT_MODES, build_vocab, gen_corpus, mentions_word, read_dataset, read_vocab,
                   split_corpus, write_dataset, write_vocab)
from .decoder import MODEL_KINDS
from .inference import generate
from .metrics import eval_report
from .training import (TrainConfig, checkpoint_load, checkpoint_save, derive_seed, model_config_for, train)

DISPLAY_NAMES = {"twin": "NTT", "baseline": "NBT"}


class UsageError(Exception):
    pass


def atomic_write(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_via(path, writer) -> None:
    """Run ``writer(tmp_path)`` and rename the result onto ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_config_file(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    return parse


def _non_negative_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ntt", description="Twin cascaded attention captioning on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value file of defaults for the flags")
        p.add_argument("--workers", type=_positive(int), help="parallel workers (default 1, env NTT_WORKERS)")

    g = sub.add_parser("gen-data", help="generate a synthetic corpus and split it")
    common(g)
    g.add_argument("--seed", type=int)
    g.add_argument("--n", type=_positive(int))
    g.add_argument("--split", choices=SPLIT_MODES)
    g.add_argument("--out")
    g.add_argument("--noise", type=float)
    g.add_argument("--d-v", type=_positive(int))
    g.add_argument("--novel-words", help="comma-separated sub-category words kept out of training (novel split)")
    g.add_argument("--heldout-pair", help="two comma-separated categories never seen together in training (robust split)")

    t = sub.add_parser("train", help="train a decoder")
    common(t)
    t.add_argument("--model", choices=MODEL_KINDS)
    t.add_argument("--data", help="dataset directory written by gen-data")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--log", help="training log path (default CKPT.log)")
    t.add_argument("--epochs", type=_non_negative_int)
    t.add_argument("--batch", type=_positive(int))
    t.add_argument("--lr", type=_positive(float))
    t.add_argument("--anneal-every", type=_positive(int))
    t.add_argument("--anneal-factor", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--hidden", type=_positive(int))
    t.add_argument("--embed", type=_positive(int))
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--log-timing", action="store_true", default=None, help="add wall time to the log")

    c = sub.add_parser("caption", help="caption a dataset file")
    common(c)
    c.add_argument("--ckpt")
    c.add_argument("--data", help="dataset file (.jsonl)")
    c.add_argument("--beam", type=_positive(int))
    c.add_argument("--max-len", type=_positive(int))
    c.add_argument("--out")

    e = sub.add_parser("eval", help="compare checkpoints on the test split")
    common(e)
    e.add_argument("--ckpts", help="comma-separated checkpoint paths")
    e.add_argument("--data", help="dataset directory written by gen-data")
    e.add_argument("--beam", type=_positive(int))
    e.add_argument("--max-len", type=_positive(int))
    e.add_argument("--out", help="report path; records go to OUT.jsonl")
    return parser


DEFAULTS = {
    "gen-data": dict(seed=0, n=200, split="standard", noise=0.1, d_v=20, novel_words="zebra",
                     heldout_pair="animal,furniture"),
    "train": dict(epochs=50, batch=16, lr=5e-4, anneal_every=3, anneal_factor=0.8, seed=0, hidden=64, embed=32,
                  dtype="float32", log_timing=False),
    "caption": dict(beam=3, max_len=20),
    "eval": dict(beam=3, max_len=20),
}
REQUIRED = {"gen-data": ("out",), "train": ("model", "data", "out"), "caption": ("ckpt", "data", "out"),
            "eval": ("ckpts", "data", "out")}


def resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    """Merge flags > config file > defaults, then validate everything."""
    cmd = args.command
    conf = read_config_file(args.config) if args.config else {}
    sub = next(a for a in parser._subparsers._group_actions[0].choices.values() if a.prog.endswith(cmd))
    actions = {a.dest: a for a in sub._actions}
    unknown = set(conf) - set(actions) - {"config"}
    if unknown:
        raise UsageError(f"unknown config keys for {cmd}: {sorted(unknown)}")
    for key, value in conf.items():
        if getattr(args, key, None) is not None:
            continue
        action = actions[key]
        try:
            if action.type is not None:
                value = action.type(value)
            elif isinstance(action, argparse._StoreTrueAction):
                value = value.lower() in ("1", "true", "yes")
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"config {key}={value}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config {key}={value}: choose from {list(action.choices)}")
        setattr(args, key, value)
    for key, value in DEFAULTS.get(cmd, {}).items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    if args.workers is None:
        env = os.environ.get("NTT_WORKERS")
        try:
            args.workers = int(env) if env else 1
        except ValueError:
            raise UsageError(f"NTT_WORKERS={env!r} is not an integer") from None
        if args.workers < 1:
            raise UsageError("NTT_WORKERS must be >= 1")
    missing = [k for k in REQUIRED[cmd] if getattr(args, k, None) is None]
    if missing:
        raise UsageError(f"{cmd}: missing required option(s) " + ", ".join("--" + m.replace("_", "-") for m in missing))
    if cmd == "train":
        if not 0.0 < args.anneal_factor < 1.0:
            raise UsageError("--anneal-factor must be in (0, 1)")
        for name in ("train.jsonl", "vocab.txt", "lexicon.tsv"):
            if not (Path(args.data) / name).is_file():
                raise UsageError(f"--data {args.data}: missing {name}")
    if cmd == "gen-data":
        if args.noise < 0:
            raise UsageError("--noise must be >= 0")
        if len(args.heldout_pair.split(",")) != 2:
            raise UsageError("--heldout-pair needs exactly two categories")
    if cmd == "caption":
        for p in (args.ckpt, args.data):
            if not Path(p).is_file():
                raise UsageError(f"no such file: {p}")
    if cmd == "eval":
        args.ckpts = [p for p in args.ckpts.split(",") if p]
        for p in args.ckpts:
            if not Path(p).is_file():
                raise UsageError(f"no such file: {p}")
        if not (Path(args.data) / "test.jsonl").is_file():
            raise UsageError(f"--data {args.data}: missing test.jsonl")
    return args


def read_meta(directory) -> dict:
    path = Path(directory) / "meta.txt"
    return read_config_file(path) if path.is_file() else {}


def cmd_gen_data(args) -> None:
    cfg = CorpusConfig(noise=args.noise, d_v=args.d_v)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    records = gen_corpus(derive_seed(args.seed, "corpus"), args.n, cfg)
    novel = tuple(w for w in args.novel_words.split(",") if w)
    pair = tuple(args.heldout_pair.split(","))
    train_set, val, test = split_corpus(records, args.split, derive_seed(args.seed, "split"), novel, pair)
    vocab = build_vocab(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train_set), ("val", val), ("test", test)):
        _atomic_via(out / f"{name}.jsonl", lambda tmp, part=part: write_dataset(part, tmp))
    tmpdir = Path(tempfile.mkdtemp(dir=out, prefix=".vocab."))
    try:
        write_vocab(vocab, tmpdir)
        for name in ("vocab.txt", "lexicon.tsv"):
            os.replace(tmpdir / name, out / name)
    finally:
        for leftover in tmpdir.iterdir():
            leftover.unlink()
        tmpdir.rmdir()
    meta = [f"mode={args.split}", f"seed={args.seed}", f"n={args.n}", f"d_v={args.d_v}", f"noise={args.noise}",
            f"novel_words={','.join(novel)}", f"heldout_pair={','.join(pair)}",
            f"sizes={len(train_set)},{len(val)},{len(test)}"]
    atomic_write(out / "meta.txt", "\n".join(meta) + "\n")


def cmd_train(args) -> None:
    data = Path(args.data)
    records = read_dataset(data / "train.jsonl")
    if not records:
        raise UsageError(f"{data / 'train.jsonl'} holds no scenes")
    vocab = read_vocab(data)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr0=args.lr, anneal_every=args.anneal_every,
                      anneal_factor=args.anneal_factor, seed=args.seed, hidden=args.hidden, embed=args.embed,
                      dtype=args.dtype, workers=args.workers)
    model_cfg = model_config_for(args.model, vocab, records[0].features.shape[1], cfg)
    result = train(records, vocab, model_cfg, cfg)
    _atomic_via(args.out, lambda tmp: checkpoint_save(result.params, result.opt, model_cfg, tmp, cfg, vocab))
    atomic_write(args.log or f"{args.out}.log", result.log.render(bool(args.log_timing)))


def _load_model(path):
    ck = checkpoint_load(path)
    if ck.vocab is None:
        raise UsageError(f"{path}: checkpoint carries no vocabulary")
    return ck


def cmd_caption(args) -> None:
    ck = _load_model(args.ckpt)
    records = read_dataset(args.data)
    hyps = generate(ck.params, ck.model, ck.vocab, records, args.beam, args.max_len, args.workers)
    lines = []
    for rec, h in zip(records, hyps):
        lines.append(json.dumps({
            "id": rec.id,
            "tokens": h.words(ck.vocab),
            "grounding": [None if g is None else list(g) for g in h.grounding],
            "logprob": h.logprob,
            "text": h.render(ck.vocab),
        }))
    atomic_write(args.out, "".join(line + "\n" for line in lines))


def cmd_eval(args) -> None:
    data = Path(args.data)
    meta = read_meta(data)
    records = read_dataset(data / "test.jsonl")
    split = meta.get("mode", "standard")
    if split == "novel":
        # in-domain scenes only
        words = [w for w in meta.get("novel_words", "").split(",") if w]
        records = [r for r in records if not mentions_word(r, words)]
    if len(records) < 2:
        raise UsageError(f"{data / 'test.jsonl'}: need at least 2 evaluable scenes, found {len(records)}")
    models = []
    for path in args.ckpts:
        ck = _load_model(path)
        models.append((DISPLAY_NAMES.get(ck.model.kind, ck.model.kind), ck.params, ck.model, ck.vocab))
    report = eval_report(models, split, records, args.beam, args.max_len, args.workers)
    atomic_write(args.out, report.render())
    atomic_write(f"{args.out}.jsonl", report.to_records())


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "caption": cmd_caption, "eval": cmd_eval}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args = resolve(args, parser)
        COMMANDS[args.command](args)
    except (UsageError, ValueError, ArithmeticError, OSError) as exc:
        print(f"ntt {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())
