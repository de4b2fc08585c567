"""Teacher-forced training: composite cross-entropy, Adam with step annealing, checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import RegionFeatures
from .data import EOS, SceneRecord, Vocab
from .decoder import ModelConfig, initial_state, init_params, prepare, step_fn
from .grounding import GroundingOutput, ground
from .tensor import ParamStore, Tensor


def derive_seed(seed: int, purpose: str) -> int:
    """Sub-seed for one purpose: first 8 bytes of sha256(f"{seed}:{purpose}")."""
    digest = hashlib.sha256(f"{seed}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr0: float = 5e-4
    anneal_every: int = 3
    anneal_factor: float = 0.8
    seed: int = 0
    hidden: int = 64
    embed: int = 32
    beam: int = 3
    clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_weights: tuple = (1.0, 1.0, 1.0)  # word/pointer, plurality, sub-category
    dtype: str = "float32"
    workers: int = 1

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("batch_size", "lr0", "anneal_every", "hidden", "embed", "beam", "clip", "workers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.anneal_factor < 1.0:
            raise ValueError("anneal_factor must be in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def model_config_for(kind: str, vocab: Vocab, d_v: int, cfg: TrainConfig, **overrides) -> ModelConfig:
    return ModelConfig(kind=kind, n_vocab=len(vocab), n_textual=vocab.n_textual, n_subcats=vocab.n_subcats,
                       d_v=d_v, hidden=cfg.hidden, embed=cfg.embed, dtype=cfg.dtype, **overrides)


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    """Teacher-forcing arrays, all (T, B) with T the longest sequence (+EOS)."""

    regions: RegionFeatures
    inputs: np.ndarray
    targets: np.ndarray  # column of the full word distribution
    step_mask: np.ndarray
    visual: np.ndarray
    slot_region: np.ndarray
    plural: np.ndarray
    subcat: np.ndarray
    lengths: np.ndarray

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]


def encode_batch(records: Sequence[SceneRecord], vocab: Vocab, dtype=np.float64) -> Batch:
    B = len(records)
    steps = max(len(r.tokens) for r in records) + 1
    z = lambda: np.zeros((steps, B), np.intp)  # noqa: E731
    inputs, targets, slot_region, plural, subcat = z(), z(), z(), z(), z()
    step_mask = np.zeros((steps, B), bool)
    visual = np.zeros((steps, B), bool)
    S = vocab.n_textual
    eos = vocab.id(EOS)
    for b, r in enumerate(records):
        prev = vocab.id("<bos>")
        for t, (tok, g) in enumerate(zip(r.tokens, r.grounding)):
            inputs[t, b] = prev
            step_mask[t, b] = True
            if g is None:
                tid = vocab.id(tok)
                if tid >= S:
                    raise ValueError(f"scene {r.id}: textual token {tok!r} is not in the textual vocabulary")
                targets[t, b] = tid
            else:
                targets[t, b] = S + g.region
                visual[t, b] = True
                slot_region[t, b], plural[t, b], subcat[t, b] = g
            prev = vocab.id(tok)
        n = len(r.tokens)
        inputs[n, b], targets[n, b], step_mask[n, b] = prev, eos, True
    regions = RegionFeatures.stack([(r.features, r.conv_features) for r in records], dtype=dtype)
    return Batch(regions, inputs, targets, step_mask, visual, slot_region, plural, subcat,
                 step_mask.sum(axis=0))


def forward(params: ParamStore, cfg: ModelConfig, batch: Batch, vocab: Vocab, train: bool = False,
            rng: np.random.Generator | None = None) -> list[GroundingOutput]:
    """Teacher-forced pass; one GroundingOutput per step."""
    step = step_fn(cfg)
    cache = prepare(batch.regions, params, cfg)
    state = initial_state(cfg, batch.regions.batch)
    outputs = []
    sub_words = vocab.subcat_words
    for t in range(batch.steps):
        out = step(state, batch.inputs[t], batch.regions, params, cfg, train, rng, cache)
        outputs.append(ground(out, batch.regions, params, batch.slot_region[t], sub_words, cache))
        state = out.state
    return outputs


def composite_loss(outputs: Sequence[GroundingOutput], batch: Batch, weights=(1.0, 1.0, 1.0)) -> Tensor:
    """Mean over scenes of the per-token mean of

    -log P_full[target] (+ -log P_p[plurality] - log P_sc[subcat] at visual steps).
    """
    if len(outputs) != batch.steps:
        raise ValueError(f"{len(outputs)} outputs for a batch of {batch.steps} steps")
    w_word, w_p, w_sc = weights
    dtype = outputs[0].log_txt.dtype
    total = None
    for t, out in enumerate(outputs):
        live = Tensor(batch.step_mask[t].astype(dtype))
        vis = Tensor(batch.visual[t].astype(dtype))
        nll = T.neg(T.pick(out.log_full, batch.targets[t])) * w_word
        slot = T.pick(out.log_p, batch.plural[t]) * w_p + T.pick(out.log_sc, batch.subcat[t]) * w_sc
        term = nll * live - slot * vis
        total = term if total is None else total + term
    per_scene = total * Tensor((1.0 / batch.lengths).astype(dtype))
    return T.mean(per_scene)


def sequence_loss(params: ParamStore, cfg: ModelConfig, batch: Batch, vocab: Vocab, train: bool = False,
                  rng: np.random.Generator | None = None, weights=(1.0, 1.0, 1.0)) -> Tensor:
    return composite_loss(forward(params, cfg, batch, vocab, train, rng), batch, weights)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    lr: float = 5e-4

    @classmethod
    def for_params(cls, params: ParamStore, lr: float) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0, lr)


def adam_step(params: ParamStore, grads: dict, opt: OptimizerState, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place."""
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    opt.step += 1
    c1 = 1.0 - beta1 ** opt.step
    c2 = 1.0 - beta2 ** opt.step
    for name, p in params.items():
        g = grads[name]
        m = opt.m[name] = beta1 * opt.m[name] + (1.0 - beta1) * g
        v = opt.v[name] = beta2 * opt.v[name] + (1.0 - beta2) * g * g
        p.data -= (opt.lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


def clip_gradients(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.anneal_factor ** (epoch // cfg.anneal_every)


# ---------------------------------------------------------------- loop

@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (epoch, lr, mean_loss, seconds)

    def render(self, timing: bool = False) -> str:
        head = "# epoch\tlr\tmean_loss" + ("\tseconds" if timing else "")
        lines = [head]
        for epoch, lr, loss, secs in self.rows:
            line = f"{epoch}\t{lr:.10g}\t{loss:.10g}"
            lines.append(line + (f"\t{secs:.3f}" if timing else ""))
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    params: ParamStore
    opt: OptimizerState
    log: TrainLog
    model: ModelConfig


def _chunk_grads(params, model_cfg, batch, vocab, rng, weights):
    loss = sequence_loss(params, model_cfg, batch, vocab, True, rng, weights)
    return float(loss.data), T.reverse_gradient(loss, params)


def train_step(params: ParamStore, model_cfg: ModelConfig, records: Sequence[SceneRecord], vocab: Vocab,
               opt: OptimizerState, cfg: TrainConfig, seed_tag: str, pool: ThreadPoolExecutor | None = None):
    """One optimizer update on a batch; returns the batch loss.

    With several workers the batch is cut into contiguous chunks whose
    gradients are summed in chunk order, weighted by chunk size.
    """
    dtype = model_cfg.np_dtype
    n_chunks = min(cfg.workers, len(records))
    bounds = np.linspace(0, len(records), n_chunks + 1).astype(int)
    chunks = [records[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    jobs = []
    for i, chunk in enumerate(chunks):
        rng = np.random.default_rng(derive_seed(cfg.seed, f"{seed_tag}/chunk{i}"))
        jobs.append((params, model_cfg, encode_batch(chunk, vocab, dtype), vocab, rng, cfg.loss_weights))
    if pool is not None and len(jobs) > 1:
        results = list(pool.map(lambda a: _chunk_grads(*a), jobs))
    else:
        results = [_chunk_grads(*a) for a in jobs]
    n = len(records)
    loss = 0.0
    grads = {k: np.zeros_like(p.data) for k, p in params.items()}
    for chunk, (chunk_loss, chunk_grads) in zip(chunks, results):
        w = len(chunk) / n
        loss += w * chunk_loss
        for k in grads:
            grads[k] += (w * chunk_grads[k]).astype(grads[k].dtype)
    if not math.isfinite(loss):
        return loss
    clip_gradients(grads, cfg.clip)
    adam_step(params, grads, opt, cfg.beta1, cfg.beta2, cfg.eps)
    return loss


class TrainingDiverged(FloatingPointError):
    pass


def train(records: Sequence[SceneRecord], vocab: Vocab, model_cfg: ModelConfig, cfg: TrainConfig,
          params: ParamStore | None = None, opt: OptimizerState | None = None, log_path=None,
          log_timing: bool = False, callback=None) -> TrainResult:
    """Teacher-forced training; every source of randomness derives from ``cfg.seed``."""
    if not records:
        raise ValueError("cannot train on an empty corpus")
    params = params if params is not None else init_params(model_cfg, derive_seed(cfg.seed, "init"))
    opt = opt or OptimizerState.for_params(params, cfg.lr0)
    shuffle = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    log = TrainLog()
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            opt.lr = lr_schedule(epoch, cfg)
            order = shuffle.permutation(len(records))
            losses = []
            for bi, lo in enumerate(range(0, len(records), cfg.batch_size)):
                batch = [records[i] for i in order[lo:lo + cfg.batch_size]]
                try:
                    loss = train_step(params, model_cfg, batch, vocab, opt, cfg, f"dropout/{epoch}/{bi}", pool)
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"epoch {epoch}, batch {bi}: {exc}") from exc
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"loss is {loss} at epoch {epoch}, batch {bi}")
                losses.append(loss * len(batch))
            log.rows.append((epoch, opt.lr, float(np.sum(losses) / len(records)), time.perf_counter() - start))
            if callback is not None:
                callback(epoch, log.rows[-1])
    finally:
        if pool is not None:
            pool.shutdown()
    if log_path is not None:
        Path(log_path).write_text(log.render(log_timing), encoding="utf-8")
    return TrainResult(params, opt, log, model_cfg)


def evaluate_loss(params: ParamStore, model_cfg: ModelConfig, records: Sequence[SceneRecord], vocab: Vocab,
                  batch_size: int = 64, weights=(1.0, 1.0, 1.0)) -> float:
    """Eval-mode composite loss averaged over scenes."""
    total = 0.0
    with T.no_grad():
        for lo in range(0, len(records), batch_size):
            chunk = records[lo:lo + batch_size]
            batch = encode_batch(chunk, vocab, model_cfg.np_dtype)
            total += float(sequence_loss(params, model_cfg, batch, vocab, weights=weights).data) * len(chunk)
    return total / len(records)


def token_cross_entropy(params: ParamStore, model_cfg: ModelConfig, records: Sequence[SceneRecord], vocab: Vocab,
                        batch_size: int = 64) -> float:
    """Eval-mode -log P_full[target] averaged over every token (EOS included) of ``records``."""
    total, count = 0.0, 0
    with T.no_grad():
        for lo in range(0, len(records), batch_size):
            batch = encode_batch(records[lo:lo + batch_size], vocab, model_cfg.np_dtype)
            for t, out in enumerate(forward(params, model_cfg, batch, vocab)):
                live = batch.step_mask[t]
                picked = out.log_full.data[np.arange(live.size), batch.targets[t]]
                total -= float(np.sum(picked[live], dtype=np.float64))
                count += int(live.sum())
    return total / count


# ---------------------------------------------------------------- checkpoints

MAGIC = b"NTTC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ParamStore
    opt: OptimizerState | None
    model: ModelConfig
    train: TrainConfig | None
    vocab: Vocab | None


def _config_block(model: ModelConfig, train_cfg: TrainConfig | None, opt: OptimizerState | None,
                  vocab: Vocab | None) -> bytes:
    lines = [f"model.{k}={json.dumps(v)}" for k, v in model.to_dict().items()]
    if train_cfg is not None:
        lines += [f"train.{k}={json.dumps(v)}" for k, v in train_cfg.to_dict().items()]
    if opt is not None:
        lines += [f"opt.step={opt.step}", f"opt.lr={json.dumps(opt.lr)}"]
    if vocab is not None:
        lines += [f"vocab.tokens={json.dumps(vocab.tokens)}", f"vocab.n_textual={vocab.n_textual}",
                  f"vocab.lexicon={json.dumps([list(x) for x in vocab.lexicon])}"]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _write_tensor(buf, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def checkpoint_save(params: ParamStore, opt: OptimizerState | None, model: ModelConfig, path,
                    train_cfg: TrainConfig | None = None, vocab: Vocab | None = None) -> None:
    """Binary checkpoint: magic, version, config block, then named little-endian float32 tensors.

    Parameters are stored as 32-bit floats; a float64 store is narrowed.
    """
    tensors = [(name, p.data) for name, p in params.items()]
    if opt is not None:
        tensors += [(f"adam.m/{k}", a) for k, a in opt.m.items()]
        tensors += [(f"adam.v/{k}", a) for k, a in opt.v.items()]
    block = _config_block(model, train_cfg, opt, vocab)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(block)))
    buf.write(block)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint (wanted {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_load(path, expected: ParamStore | None = None) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (block_len,) = r.unpack("<I")
    conf: dict[str, dict] = {"model": {}, "train": {}, "opt": {}, "vocab": {}}
    try:
        block = r.take(block_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: config block is not UTF-8") from exc
    for line in block.splitlines():
        key, _, value = line.partition("=")
        section, _, name = key.partition(".")
        if section not in conf:
            raise CheckpointError(f"{path}: unknown config key {key!r}")
        try:
            conf[section][name] = json.loads(value)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: bad config value for {key!r}") from exc
    (n,) = r.unpack("<I")
    arrays = {}
    for _ in range(n):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")

    try:
        model = ModelConfig.from_dict(conf["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model config: {exc}") from exc
    if expected is None:
        # shapes only; the values are discarded
        expected = init_params(model)
    params = ParamStore()
    for name, p in expected.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: parameter {name!r} missing from checkpoint")
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"{path}: parameter {name!r} has shape {arrays[name].shape} in checkpoint, "
                                  f"expected {p.shape}")
        params.add(name, arrays[name].astype(model.np_dtype))
    extra = {k for k in arrays if not k.startswith("adam.")} - set(expected)
    if extra:
        raise CheckpointError(f"{path}: unexpected parameters {sorted(extra)}")
    opt = None
    if conf["opt"]:
        opt = OptimizerState({k[7:]: a for k, a in arrays.items() if k.startswith("adam.m/")},
                             {k[7:]: a for k, a in arrays.items() if k.startswith("adam.v/")},
                             int(conf["opt"]["step"]), float(conf["opt"]["lr"]))
    vocab = None
    if conf["vocab"]:
        v = conf["vocab"]
        vocab = Vocab(v["tokens"], int(v["n_textual"]), tuple(tuple(x) for x in v["lexicon"]))
    train_cfg = TrainConfig.from_dict(conf["train"]) if conf["train"] else None
    return Checkpoint(params, opt, model, train_cfg, vocab)
