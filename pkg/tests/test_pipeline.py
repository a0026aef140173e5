import json

import numpy as np
import pytest

from memarray.datagen import CorpusConfig, StreamSpec, gen_corpus
from memarray.model import ModelConfig, init_model, joint_loss
from memarray.numcore import GradStore
from memarray.pipeline import (
    AdaDelta,
    CheckpointCorruptError,
    CheckpointShapeError,
    CheckpointVersionError,
    FrozenMutation,
    TrainConfig,
    UpstreamMismatch,
    _run_epochs,
    checkpoint_load,
    checkpoint_save,
    deserialize_model,
    encode_corpus,
    extract_ufe,
    group_digest,
    load_ufe,
    serialize_model,
    subset,
    train_stage1,
    train_stage2,
)


def tiny_corpus(seed=0):
    cfg = CorpusConfig(vocab_size=4, feat_dim=4, min_len=1, max_len=3, frames_per_label=6, frame_jitter=1,
                       subsample=2, n_train=8, n_dev=3, n_test=3,
                       streams=[StreamSpec("A", snr_db=20.0), StreamSpec("B", snr_db=5.0, smear=2),
                                StreamSpec("nomic", nomic=True)])
    return gen_corpus(cfg, seed)


MCFG = ModelConfig(vocab_size=4, feat_dim=4, subsample=2, enc_hidden=6, enc_layers=1, enc_dim=6, att_dim=5,
                   conv_filters=2, conv_width=3, dec_hidden=6, emb_dim=4, han_dim=5, init_scale=0.3)


@pytest.fixture(scope="module")
def corpus():
    return tiny_corpus()


@pytest.fixture(scope="module")
def stage1(corpus):
    return train_stage1(corpus["train"], corpus["dev"], ["A", "B"], MCFG,
                        TrainConfig(epochs=4, patience=4, batch_size=4, eps=1e-6, seed=3))


def test_train_config_validation():
    for bad in (dict(lam=1.5), dict(patience=5, epochs=2), dict(data_fraction=0.0), dict(optimizer="adam"),
                dict(time_masks=2, dropout=0.2), dict(dropout=1.0), dict(rho=1.0), dict(eps=0.0),
                dict(batch_size=0), dict(lr=-1.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochz": 3})
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"spec_augment": {"bogus": 1}})
    cfg = TrainConfig.from_dict({"spec_augment": {"num_time_masks": 1, "max_time": 4, "num_freq_masks": 0,
                                                  "max_freq": 0}, "batch_size": 2})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() == TrainConfig.from_dict(cfg.to_dict()).digest() != TrainConfig().digest()


def test_adadelta_first_step_magnitude():
    # with empty accumulators the first update is -sqrt(eps) / sqrt((1 - rho) g^2 + eps) * g
    m = init_model(MCFG, 0)
    m.set_trainable(["han"])
    gs = GradStore(m.groups)
    gs.zero()
    g = gs["han"]
    key = sorted(g)[0]
    g[key][...] = 2.0
    before = m.groups["han"].tensors[key].copy()
    AdaDelta(rho=0.95, eps=1e-6).step(m.groups, gs)
    step = m.groups["han"].tensors[key] - before
    np.testing.assert_allclose(step, -np.sqrt(1e-6) / np.sqrt(0.05 * 4 + 1e-6) * 2.0, rtol=1e-12)


def test_stage1_loss_decreases(stage1):
    h = stage1.history
    assert h[0]["train_loss"] > h[-1]["train_loss"]
    assert stage1.model.meta["stage"] == 1 and "config_hash" in stage1.model.meta


def test_best_epoch_has_minimum_dev_loss(stage1):
    dev = [e["dev_loss"] for e in stage1.history]
    assert stage1.best_epoch == 1 + int(np.argmin(dev))
    assert stage1.model.meta["best_dev_loss"] == min(dev)


def test_early_stopping_patience():
    m = init_model(MCFG, 0)
    m.set_trainable(["han"])
    devs = iter([3.0, 2.0, 2.5, 2.6, 2.7, 1.0, 0.5])
    res = _run_epochs(m, TrainConfig(epochs=7, patience=3, seed=0), 2, lambda *a: 0.0, lambda _: next(devs), "t")
    assert [e["epoch"] for e in res.history] == [1, 2, 3, 4, 5]
    assert res.best_epoch == 2


def test_stage1_deterministic(corpus):
    cfg = TrainConfig(epochs=1, patience=1, batch_size=4, eps=1e-6, seed=5)
    a = train_stage1(corpus["train"], corpus["dev"], ["A"], MCFG, cfg).model
    b = train_stage1(corpus["train"], corpus["dev"], ["A"], MCFG, cfg).model
    assert serialize_model(a) == serialize_model(b)


def test_stage1_frozen_groups_untouched(corpus):
    res = train_stage1(corpus["train"], corpus["dev"], ["A"], MCFG,
                       TrainConfig(epochs=1, patience=1, batch_size=4, seed=0))
    init = init_model(MCFG, 0)
    assert group_digest(res.model.groups["han"]) == group_digest(init.groups["han"])


def test_lambda_zero_leaves_ctc_untouched(corpus):
    res = train_stage1(corpus["train"], corpus["dev"], ["A"], MCFG,
                       TrainConfig(lam=0.0, epochs=1, patience=1, batch_size=4, seed=0))
    init = init_model(MCFG, 0)
    assert group_digest(res.model.groups["ctc/0"]) == group_digest(init.groups["ctc/0"])
    assert group_digest(res.model.groups["decoder"]) != group_digest(init.groups["decoder"])


def test_ufe_roundtrip_and_upstream_check(stage1, corpus, tmp_path):
    h = checkpoint_save(stage1.model, tmp_path / "s1.ckpt")
    m1 = extract_ufe(stage1.model, {"test": corpus["test"]}, tmp_path / "ufe1", h)
    m2 = extract_ufe(checkpoint_load(tmp_path / "s1.ckpt"), {"test": corpus["test"]}, tmp_path / "ufe2", h)
    assert m1 == m2
    for u, e in m1["splits"]["test"].items():
        for fn in e["streams"].values():
            assert (tmp_path / "ufe1/test" / fn).read_bytes() == (tmp_path / "ufe2/test" / fn).read_bytes()
    items = load_ufe(tmp_path / "ufe1", "test", expect_checkpoint=h)
    direct = encode_corpus(stage1.model, corpus["test"])
    for a, b in zip(items, direct):
        assert a.utt_id == b.utt_id and a.transcript == b.transcript
        for s in ("A", "B", "nomic"):
            assert np.array_equal(a.hs[s], b.hs[s])
    with pytest.raises(UpstreamMismatch):
        load_ufe(tmp_path / "ufe1", "test", expect_checkpoint="0" * 16)


def test_ufe_length_is_subsampled(stage1, corpus):
    for b, it in zip(corpus["test"], encode_corpus(stage1.model, corpus["test"])):
        for s in it.hs:
            assert it.hs[s].shape == (b.stream(s).T // MCFG.subsample, MCFG.enc_dim)


@pytest.fixture(scope="module")
def stage2(stage1, corpus):
    train = encode_corpus(stage1.model, corpus["train"])
    dev = encode_corpus(stage1.model, corpus["dev"])
    return train_stage2(train, dev, ["A", "B"], stage1.model,
                        TrainConfig(lam=0.2, epochs=3, patience=3, batch_size=4, eps=1e-6, seed=1, time_masks=1,
                                    time_mask_len=2))


def test_stage2_trains_only_stream_attention(stage1, stage2):
    m1 = stage1.model.expand_streams(2)
    m2 = stage2.model
    assert group_digest(m2.groups["han"]) != group_digest(m1.groups["han"])
    for k in m1.groups:
        if k != "han":
            assert group_digest(m2.groups[k]) == group_digest(m1.groups[k]), k
    assert [k for k, g in m2.groups.items() if not g.frozen] == ["han"]


def test_stage2_preconditions(stage1, corpus):
    items = encode_corpus(stage1.model, corpus["train"][:2])
    with pytest.raises(ValueError):
        train_stage2(items, [], ["A"], stage1.model, TrainConfig(epochs=1, patience=1))
    fresh = init_model(MCFG, 0)
    with pytest.raises(ValueError):
        train_stage2(items, [], ["A", "B"], fresh, TrainConfig(epochs=1, patience=1))


def test_frozen_mutation_detected():
    m = init_model(MCFG, 0)
    m.set_trainable(["han"])

    def sneaky(model, idx, epoch, grads):
        model.groups["decoder"].tensors["out.b"][0] += 1.0
        return 0.0

    with pytest.raises(FrozenMutation):
        _run_epochs(m, TrainConfig(epochs=1, patience=1), 1, sneaky, lambda _: 0.0, "t")


def test_subset():
    items = list(range(100))
    s = subset(items, 0.1, 0)
    assert len(s) == 10 and s == sorted(s) and s == subset(items, 0.1, 0)
    assert len(subset(items, 0.001, 0)) == 1
    assert subset(items, 1.0, 0) == items


def test_checkpoint_roundtrip_bytes(stage2, tmp_path):
    m = stage2.model
    checkpoint_save(m, tmp_path / "a.ckpt")
    back = checkpoint_load(tmp_path / "a.ckpt")
    checkpoint_save(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert {k: g.frozen for k, g in back.groups.items()} == {k: g.frozen for k, g in m.groups.items()}
    assert np.array_equal(back.unigram, m.unigram)
    hs = [np.ones((3, MCFG.enc_dim)), np.zeros((3, MCFG.enc_dim))]
    assert joint_loss(back, hs, [1], 0.3)[0] == joint_loss(m, hs, [1], 0.3)[0]


def test_checkpoint_corruption(stage2):
    raw = serialize_model(stage2.model)
    for cut in (10, len(raw) // 2, len(raw) - 1):
        with pytest.raises(CheckpointCorruptError):
            deserialize_model(raw[:cut])
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 1
    with pytest.raises(CheckpointCorruptError):
        deserialize_model(bytes(flipped))
    with pytest.raises(CheckpointCorruptError):
        deserialize_model(b"NOTACKPT" + raw[8:])


def _rewrite_header(raw, edit):
    import hashlib
    import struct
    pre = struct.Struct("<8sIQ")
    magic, version, hlen = pre.unpack_from(raw)
    header = json.loads(raw[pre.size:pre.size + hlen])
    version = edit(header) or version
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = pre.pack(magic, version, len(hb)) + hb + raw[pre.size + hlen:-32]
    return body + hashlib.sha256(body).digest()


def test_checkpoint_version_and_shape_errors(stage2):
    raw = serialize_model(stage2.model)
    with pytest.raises(CheckpointVersionError):
        deserialize_model(_rewrite_header(raw, lambda h: 99))

    def shrink(h):
        h["model_config"]["enc_dim"] += 1

    with pytest.raises(CheckpointShapeError):
        deserialize_model(_rewrite_header(raw, shrink))

    def drop_han(h):
        h["groups"] = [g for g in h["groups"] if g["name"] != "han"]

    with pytest.raises(CheckpointShapeError):
        deserialize_model(_rewrite_header(raw, drop_han))
