import math
import struct

import numpy as np
import pytest

from ntt import tensor as T
from ntt.data import build_vocab, gen_corpus
from ntt.decoder import init_params
from ntt.grounding import GroundingOutput
from ntt.tensor import ParamStore, Tensor
from ntt.training import (Batch, CheckpointError, OptimizerState, TrainConfig, adam_step, checkpoint_load,
                          checkpoint_save, clip_gradients, composite_loss, derive_seed, encode_batch, evaluate_loss,
                          lr_schedule, model_config_for, token_cross_entropy, train, TrainingDiverged)


def hand_batch(targets, mask, visual, plural, subcat):
    targets = np.array(targets)
    mask = np.array(mask, bool)
    return Batch(None, np.zeros_like(targets), targets, mask, np.array(visual, bool), np.zeros_like(targets),
                 np.array(plural), np.array(subcat), mask.sum(axis=0))


def test_perfect_predictions_zero_loss():
    out = GroundingOutput.from_probs([[1.0, 0.0]], [[0.0, 1.0]], [[1.0, 0.0]], [[1.0, 0.0]])
    batch = hand_batch([[0]], [[True]], [[False]], [[0]], [[0]])
    assert float(composite_loss([out], batch).data) == 0.0


def test_uniform_full_distribution_gives_log_ten():
    out = GroundingOutput.from_probs([[1 / 6] * 6], [[0.1] * 4 + [0.6]], [[0.5, 0.5]], [[0.5, 0.5]])
    np.testing.assert_allclose(out.P_full, 0.1)
    batch = hand_batch([[2]], [[True]], [[False]], [[0]], [[0]])
    assert float(composite_loss([out], batch).data) == pytest.approx(math.log(10), rel=1e-12)


def test_composite_loss_scalar_oracle(rng):
    S, K, C, steps, B = 4, 3, 5, 3, 2

    def dist(n):
        p = rng.random(n) + 0.05
        return p / p.sum()

    probs = [[(dist(S), dist(K + 1), dist(2), dist(C)) for _ in range(B)] for _ in range(steps)]
    outs = [GroundingOutput.from_probs(*(np.stack([probs[t][b][i] for b in range(B)]) for i in range(4)))
            for t in range(steps)]
    targets = [[1, S + 2], [S + 0, 3], [0, 0]]
    mask = [[True, True], [True, True], [True, False]]
    visual = [[False, True], [True, False], [False, False]]
    plural = [[0, 1], [1, 0], [0, 0]]
    subcat = [[0, 4], [2, 0], [0, 0]]
    loss = float(composite_loss(outs, hand_batch(targets, mask, visual, plural, subcat)).data)
    per_scene = []
    for b in range(B):
        total, n = 0.0, 0
        for t in range(steps):
            if not mask[t][b]:
                continue
            n += 1
            p_txt, p_r, p_p, p_sc = probs[t][b]
            j = targets[t][b]
            pf = p_txt[j] * p_r[K] if j < S else p_r[j - S]
            total -= math.log(pf)
            if visual[t][b]:
                total -= math.log(p_p[plural[t][b]]) + math.log(p_sc[subcat[t][b]])
        per_scene.append(total / n)
    assert loss == pytest.approx(sum(per_scene) / B, rel=1e-12)


def test_encode_batch_targets(corpus):
    records, vocab = corpus
    batch = encode_batch(records[:3], vocab)
    r = records[0]
    for t, (tok, g) in enumerate(zip(r.tokens, r.grounding)):
        if g is None:
            assert batch.targets[t, 0] == vocab.id(tok)
        else:
            assert batch.targets[t, 0] == vocab.n_textual + g.region and batch.visual[t, 0]
    n = len(r.tokens)
    assert batch.targets[n, 0] == vocab.id("<eos>") and batch.lengths[0] == n + 1
    assert batch.inputs[0, 0] == vocab.id("<bos>")


def test_adam_first_step_is_sign():
    params = ParamStore()
    params.add("w", np.array([1.0, -2.0, 3.0, 0.5]))
    g = np.array([0.3, -5.0, 1e-3, -2e-2])
    opt = OptimizerState.for_params(params, 0.01)
    adam_step(params, {"w": g}, opt)
    np.testing.assert_allclose(params["w"].data - [1.0, -2.0, 3.0, 0.5], -0.01 * np.sign(g), rtol=1e-4)


def test_adam_zero_gradient_no_change():
    params = ParamStore()
    params.add("w", np.array([1.0, -2.0]))
    opt = OptimizerState.for_params(params, 0.01)
    adam_step(params, {"w": np.zeros(2)}, opt)
    np.testing.assert_array_equal(params["w"].data, [1.0, -2.0])


def test_adam_rejects_nan_naming_parameter():
    params = ParamStore()
    params.add("w", np.ones(2))
    with pytest.raises(FloatingPointError, match="'w'"):
        adam_step(params, {"w": np.array([np.nan, 0.0])}, OptimizerState.for_params(params, 0.1))


def test_clip_gradients():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_gradients(grads, 1.0) == 5.0
    np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [0.6, 0.8])


@pytest.mark.parametrize("epoch,factor", [(0, 1.0), (1, 1.0), (2, 1.0), (3, 0.8), (5, 0.8), (6, 0.64)])
def test_lr_schedule(epoch, factor):
    assert lr_schedule(epoch, TrainConfig(lr0=5e-4)) == pytest.approx(5e-4 * factor, rel=1e-15)


def test_derive_seed_stable():
    assert derive_seed(7, "init") == derive_seed(7, "init")
    assert derive_seed(7, "init") != derive_seed(7, "shuffle")
    assert derive_seed(0, "x") == int.from_bytes(__import__("hashlib").sha256(b"0:x").digest()[:8], "little")


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(anneal_factor=1.5)
    cfg = TrainConfig(epochs=3, workers=2)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def tiny_setup(kind="twin", **kw):
    records = gen_corpus(7, 12)
    vocab = build_vocab(records)
    base = dict(epochs=3, batch_size=4, lr0=5e-3, hidden=8, embed=8, seed=3)
    base.update(kw)
    cfg = TrainConfig(**base)
    return records, vocab, cfg, model_config_for(kind, vocab, records[0].features.shape[1], cfg)


@pytest.mark.parametrize("kind", ["twin", "baseline"])
def test_training_is_deterministic(kind):
    records, vocab, cfg, mc = tiny_setup(kind)
    a = train(records, vocab, mc, cfg)
    b = train(records, vocab, mc, cfg)
    assert a.log.render() == b.log.render()
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


def test_training_with_workers_is_deterministic():
    records, vocab, cfg, mc = tiny_setup(workers=3)
    a = train(records, vocab, mc, cfg)
    b = train(records, vocab, mc, cfg)
    assert a.log.render() == b.log.render()


def test_training_reduces_loss():
    records, vocab, cfg, mc = tiny_setup(epochs=8)
    res = train(records, vocab, mc, cfg)
    losses = [row[2] for row in res.log.rows]
    assert np.mean(losses[-2:]) < np.mean(losses[:2])


def test_zero_epochs_keeps_initial_weights(tmp_path):
    records, vocab, cfg, mc = tiny_setup(epochs=0)
    res = train(records, vocab, mc, cfg, log_path=tmp_path / "log")
    init = init_params(mc, derive_seed(cfg.seed, "init"))
    for name in init:
        np.testing.assert_array_equal(res.params[name].data, init[name].data)
    assert (tmp_path / "log").read_text() == "# epoch\tlr\tmean_loss\n"


def test_log_timing_column():
    records, vocab, cfg, mc = tiny_setup(epochs=1)
    res = train(records, vocab, mc, cfg)
    assert res.log.render(timing=True).splitlines()[1].count("\t") == 3
    assert res.log.render().splitlines()[1].count("\t") == 2


def test_divergence_is_reported():
    records, vocab, cfg, mc = tiny_setup(epochs=1)
    params = init_params(mc, 0)
    params["embed"].data[0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        train(records, vocab, mc, cfg, params=params)


def test_eval_metrics_run(corpus):
    records, vocab = corpus
    cfg = TrainConfig(hidden=8, embed=8, dtype="float64")
    mc = model_config_for("twin", vocab, 20, cfg)
    params = init_params(mc, 0)
    ce = token_cross_entropy(params, mc, records[:5], vocab)
    # an untrained model is close to uniform over its S+K outputs
    assert 1.0 < ce < 6.0
    assert evaluate_loss(params, mc, records[:5], vocab) > ce


# ---------------------------------------------------------------- checkpoints

def saved(tmp_path, kind="twin"):
    records, vocab, cfg, mc = tiny_setup(kind, epochs=1)
    res = train(records, vocab, mc, cfg)
    path = tmp_path / "m.ckpt"
    checkpoint_save(res.params, res.opt, mc, path, cfg, vocab)
    return res, path, cfg, vocab


def test_checkpoint_round_trip(tmp_path):
    res, path, cfg, vocab = saved(tmp_path)
    ck = checkpoint_load(path)
    assert list(ck.params) == list(res.params)
    for name in res.params:
        np.testing.assert_array_equal(ck.params[name].data, res.params[name].data)
        np.testing.assert_array_equal(ck.opt.m[name], res.opt.m[name])
    assert ck.model == res.model and ck.train == cfg and ck.vocab == vocab
    assert ck.opt.step == res.opt.step
    checkpoint_save(ck.params, ck.opt, ck.model, tmp_path / "again.ckpt", ck.train, ck.vocab)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_header(tmp_path):
    _, path, _, _ = saved(tmp_path)
    data = path.read_bytes()
    assert data[:4] == b"NTTC" and struct.unpack("<I", data[4:8]) == (1,)


def test_checkpoint_bad_magic(tmp_path):
    _, path, _, _ = saved(tmp_path)
    data = bytearray(path.read_bytes())
    data[0:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_load(path)


def test_checkpoint_truncated_and_trailing(tmp_path):
    _, path, _, _ = saved(tmp_path)
    data = path.read_bytes()
    path.write_bytes(data[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint_load(path)
    path.write_bytes(data + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint_load(path)


def test_checkpoint_shape_mismatch(tmp_path):
    res, path, cfg, vocab = saved(tmp_path)
    bigger = init_params(model_config_for("twin", vocab, 20, TrainConfig(hidden=12, embed=8)))
    with pytest.raises(CheckpointError, match=r"shape \(.*\).*expected"):
        checkpoint_load(path, expected=bigger)


def test_checkpoint_loaded_dtype_follows_model(tmp_path):
    _, path, _, _ = saved(tmp_path)
    ck = checkpoint_load(path)
    assert all(p.dtype == np.float32 for p in ck.params.values())
