import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from crnnrec import checkpoint as ckpt_io
from crnnrec import kernel as K
from crnnrec.batching import make_batches, pad_batch, encode_contexts
from crnnrec.context import ContextSchema
from crnnrec.data import Corpus, Session
from crnnrec.errors import ConfigurationError, InputError
from crnnrec.models import forward_sequence
from crnnrec.training import (TrainConfig, TrainingDiverged, batch_loss, final_loss, lr_schedule,
                              model_config_for, train)

TYPES = ("view", "sale")
SCHEMA = ContextSchema(TYPES)


def session(sid, items, start=1_400_000_000.0, gap=30.0):
    n = len(items)
    return Session(sid, tuple(items), tuple(start + gap * i for i in range(n)),
                   tuple(i % 2 for i in range(n)))


def toy_corpus(n_sessions=30, n_items=12, seed=0):
    rng = np.random.default_rng(seed)
    sessions = [session(f"s{i}", rng.integers(n_items, size=int(rng.integers(2, 9))).tolist(),
                        start=1_400_000_000.0 + 3600 * i)
                for i in range(n_sessions)]
    return Corpus(sessions, n_items, TYPES)


def memorization_corpus():
    return Corpus([session("m", list(range(10)))], 10, TYPES)


def test_lr_schedule_endpoints_and_midpoint():
    cfg = TrainConfig(iterations=1000)
    assert lr_schedule(0, cfg) == 0.01
    assert lr_schedule(1000, cfg) == 0.001
    assert_allclose(lr_schedule(500, cfg), 0.01 / math.sqrt(50.5), rtol=1e-14)
    assert_allclose(lr_schedule(500, cfg), 1.407e-3, rtol=1e-3)
    lrs = [lr_schedule(t, cfg) for t in range(1001)]
    assert np.all(np.diff(lrs) < 0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(iterations=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_start=0.001, lr_end=0.01)
    with pytest.raises(ConfigurationError):
        TrainConfig.for_preset("transformer")


def test_mask_counts_per_session():
    sessions = [session("a", [1, 2]), session("b", [1, 2, 3]), session("c", list(range(20)))]
    batch = pad_batch(sessions, encode_contexts(sessions, SCHEMA), [0, 1, 2], SCHEMA)
    assert batch.items.shape == (3, 20)
    assert_array_equal(batch.mask.sum(axis=1), [1, 2, 19])
    dense = batch.dense_contexts(SCHEMA)
    assert_array_equal(dense.sum(axis=-1), SCHEMA.n_blocks)


def test_batch_stream_is_seeded_and_covers_epoch():
    corpus = toy_corpus(23)
    a = list(make_batches(corpus.sessions, 5, np.random.default_rng(3), SCHEMA, epochs=2))
    b = list(make_batches(corpus.sessions, 5, np.random.default_rng(3), SCHEMA, epochs=2))
    assert len(a) == 10
    for x, y in zip(a, b):
        assert_array_equal(x.items, y.items)
        assert_array_equal(x.contexts, y.contexts)
    first_epoch = a[:5]
    assert sorted(np.concatenate([bt.index for bt in first_epoch]).tolist()) == list(range(23))
    assert sum(bt.mask.sum() for bt in first_epoch) == sum(len(s) - 1 for s in corpus.sessions)


def test_batching_rejects_bad_input():
    with pytest.raises(InputError):
        next(make_batches([], 4, np.random.default_rng(0)))
    with pytest.raises(InputError):
        next(make_batches([session("x", [1])], 4, np.random.default_rng(0)))
    with pytest.raises(InputError):
        train(Corpus([], 5, TYPES), TrainConfig(iterations=1))


def test_padding_contributes_no_gradient():
    corpus = toy_corpus(6)
    cfg = TrainConfig.for_preset("concat-mult-context", embed_dim=4, hidden_dim=4)
    model = model_config_for(cfg, corpus.n_items, SCHEMA)
    from crnnrec.models import init_params
    params = init_params(model, np.random.default_rng(0))
    batch = next(make_batches(corpus.sessions, 6, np.random.default_rng(1), SCHEMA))
    tape, loss, _, _ = batch_loss(model, params, batch, SCHEMA)
    base = K.backward(tape, loss)
    pad = np.arange(batch.items.shape[1])[None, :] >= batch.lengths[:, None]
    assert pad.any()
    batch.items[pad] = np.random.default_rng(2).integers(corpus.n_items, size=pad.sum())
    tape, loss2, _, _ = batch_loss(model, params, batch, SCHEMA)
    assert float(loss2.value) == float(loss.value)
    for name, g in K.backward(tape, loss2).items():
        assert_array_equal(g, base[name], err_msg=name)


def test_reported_loss_matches_independent_path():
    corpus = toy_corpus(8)
    cfg = TrainConfig.for_preset("concat-mult-gru", embed_dim=5, hidden_dim=5, batch_size=8)
    model = model_config_for(cfg, corpus.n_items, SCHEMA)
    from crnnrec.models import init_params
    params = init_params(model, np.random.default_rng(0))
    batch = next(make_batches(corpus.sessions, 8, np.random.default_rng(0), SCHEMA))
    _, loss, total, n = batch_loss(model, params, batch, SCHEMA)
    expected = sum(forward_sequence(model, params, s.items, SCHEMA.dense(SCHEMA.encode_session(
        s.timestamps, s.event_types)))[1] for s in corpus.sessions)
    assert n == sum(len(s) - 1 for s in corpus.sessions)
    assert_allclose(total, expected, rtol=1e-10)
    assert_allclose(float(loss.value), expected / n, rtol=1e-10)


@pytest.mark.parametrize("preset", ["gru", "mult-gru", "concat-gru", "concat-mult-gru",
                                    "concat-mult-context"])
def test_memorizes_a_single_sequence(preset):
    cfg = TrainConfig.for_preset(preset, iterations=500, batch_size=1, embed_dim=32, hidden_dim=32)
    result = train(memorization_corpus(), cfg, SCHEMA)
    assert final_loss(result, window=1) < 0.05


def test_training_is_deterministic_and_logs_schedule(tmp_path):
    cfg = TrainConfig.for_preset("concat-mult-context", iterations=15, batch_size=7, embed_dim=6,
                                 hidden_dim=6, seed=5)
    runs = []
    for name in ("a", "b"):
        train(toy_corpus(), cfg, SCHEMA, checkpoint_path=tmp_path / f"{name}.ckpt",
              log_path=tmp_path / f"{name}.jsonl")
        runs.append([json.loads(line) for line in (tmp_path / f"{name}.jsonl").read_text().splitlines()])
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert [r["loss"] for r in runs[0]] == [r["loss"] for r in runs[1]]
    assert [r["lr"] for r in runs[0]] == [lr_schedule(t, cfg) for t in range(15)]
    other = TrainConfig.for_preset("concat-mult-context", iterations=15, batch_size=7, embed_dim=6,
                                   hidden_dim=6, seed=6)
    train(toy_corpus(), other, SCHEMA, checkpoint_path=tmp_path / "c.ckpt")
    assert (tmp_path / "c.ckpt").read_bytes() != (tmp_path / "a.ckpt").read_bytes()


def test_validation_recall_is_logged():
    cfg = TrainConfig.for_preset("gru", iterations=4, batch_size=8, embed_dim=4, hidden_dim=4,
                                 eval_every=2, eval_k=3)
    result = train(toy_corpus(), cfg, SCHEMA, valid=toy_corpus(5, seed=1))
    assert "valid_recall@3" in result.log[1] and "valid_recall@3" not in result.log[0]
    assert 0.0 <= result.log[3]["valid_recall@3"] <= 1.0


def test_divergence_stops_with_last_good_checkpoint(tmp_path, monkeypatch):
    real_backward = K.backward
    calls = []

    def poisoned(tape, loss):
        grads = real_backward(tape, loss)
        calls.append(1)
        if len(calls) == 4:
            grads["W_h"][0, 0] = np.nan
        return grads

    monkeypatch.setattr(K, "backward", poisoned)
    cfg = TrainConfig.for_preset("gru", iterations=50, batch_size=4, embed_dim=4, hidden_dim=4)
    path = tmp_path / "last.ckpt"
    with pytest.raises(TrainingDiverged, match="W_h") as info:
        train(toy_corpus(), cfg, SCHEMA, checkpoint_path=path)
    assert info.value.step == 3 and info.value.checkpoint_path == path
    saved = ckpt_io.load(path)
    assert all(np.all(np.isfinite(v)) for v in saved.params.values())


def test_non_finite_loss_is_reported(monkeypatch):
    cfg = TrainConfig.for_preset("gru", iterations=5, batch_size=4, embed_dim=4, hidden_dim=4)
    real = K.log_softmax
    monkeypatch.setattr(K, "log_softmax", lambda z: real(z * np.nan))
    with pytest.raises(TrainingDiverged) as info:
        train(toy_corpus(), cfg, SCHEMA)
    assert info.value.step == 0


def test_float32_training_runs():
    cfg = TrainConfig.for_preset("concat-mult-context", iterations=3, batch_size=8, embed_dim=4,
                                 hidden_dim=4, precision="float32")
    result = train(toy_corpus(), cfg, SCHEMA)
    assert result.params["V"].dtype == np.float32
    assert all(math.isfinite(r["loss"]) for r in result.log)


def test_gradient_clipping_bounds_update():
    cfg = TrainConfig.for_preset("gru", iterations=3, batch_size=8, embed_dim=4, hidden_dim=4,
                                 clip_norm=1e-3)
    result = train(toy_corpus(), cfg, SCHEMA)
    assert all(r["grad_norm"] > 1e-3 for r in result.log)
