import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memarray.datagen import (
    CorpusConfig,
    CorpusConfigError,
    DataFormatError,
    FeatureSequence,
    MaskPolicy,
    StreamSpec,
    gen_corpus,
    input_dropout,
    load_corpus,
    make_nomic,
    corrupt,
    label_templates,
    normalize_mv,
    read_matrix,
    render_clean,
    save_corpus,
    spec_augment,
    stage2_time_mask,
    write_matrix,
)
from memarray.ctc import min_frames
from memarray.numcore import derive_rng

SMALL = CorpusConfig(n_train=6, n_dev=2, n_test=3)


def test_corpus_deterministic_and_seed_sensitive():
    a = gen_corpus(SMALL, 3)
    b = gen_corpus(SMALL, 3)
    c = gen_corpus(SMALL, 4)
    for x, y in zip(a["train"], b["train"]):
        assert x.transcript == y.transcript
        assert all(np.array_equal(s.frames, t.frames) for s, t in zip(x.streams, y.streams))
    assert any(x.transcript != y.transcript for x, y in zip(a["train"], c["train"]))


def test_corpus_shapes_and_ctc_feasibility():
    cfg = CorpusConfig(n_train=40, n_dev=0, n_test=0)
    for b in gen_corpus(cfg, 0)["train"]:
        assert cfg.min_len <= len(b.transcript) <= cfg.max_len
        assert all(0 <= c < cfg.vocab_size for c in b.transcript)
        T = b.streams[0].T
        assert all(s.T == T and s.D == cfg.feat_dim for s in b.streams)
        assert T // cfg.subsample >= min_frames(b.transcript)


def test_streams_normalized_and_nomic_zero():
    b = gen_corpus(SMALL, 1)["train"][0]
    for name in ("A", "B"):
        x = b.stream(name).frames
        np.testing.assert_allclose(x.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(x.std(axis=0), 1.0, atol=1e-12)
    assert not b.stream("nomic").frames.any()


def test_normalize_flat_dimension_guard():
    x = np.c_[np.arange(5.0), np.full(5, 3.0)]
    out = normalize_mv(FeatureSequence(x, "s", "u")).frames
    assert np.array_equal(out[:, 1], np.zeros(5))
    assert np.isfinite(out).all()
    assert not normalize_mv(FeatureSequence(np.zeros((4, 2)), "s", "u")).frames.any()


def test_normalize_idempotent_and_two_frame():
    x = np.random.default_rng(0).normal(size=(9, 4)) * 3 + 1
    once = normalize_mv(FeatureSequence(x, "s", "u")).frames
    np.testing.assert_allclose(normalize_mv(FeatureSequence(once, "s", "u")).frames, once, atol=1e-9)
    two = normalize_mv(FeatureSequence(np.array([[2.0, -5.0], [4.0, 7.0]]), "s", "u")).frames
    np.testing.assert_allclose(two, [[-1.0, -1.0], [1.0, 1.0]], atol=1e-15)


def test_nomic_is_fixed_point_of_normalization():
    z = make_nomic(FeatureSequence(np.random.default_rng(0).normal(size=(6, 3)), "n", "u"))
    assert np.array_equal(normalize_mv(z).frames, z.frames)


def test_same_spec_streams_differ_only_by_noise():
    cfg = CorpusConfig(n_train=3, n_dev=0, n_test=0, frame_noise=0.0,
                       streams=[StreamSpec("x"), StreamSpec("y"), StreamSpec("n1", snr_db=10.0),
                                StreamSpec("n2", snr_db=10.0)])
    for b in gen_corpus(cfg, 0)["train"]:
        assert np.array_equal(b.stream("x").frames, b.stream("y").frames)
        assert not np.array_equal(b.stream("n1").frames, b.stream("n2").frames)
    clean = np.random.default_rng(1).normal(size=(20000, 4))
    spec = StreamSpec("n", snr_db=10.0)
    r1 = corrupt(clean, spec, np.random.default_rng(2)) - clean
    r2 = corrupt(clean, spec, np.random.default_rng(3)) - clean
    sigma = np.sqrt(np.mean(clean ** 2) / 10.0)
    for r in (r1, r2):
        assert abs(r.std() / sigma - 1) < 0.02 and abs(r.mean()) < 0.01
    assert abs(np.corrcoef(r1.ravel(), r2.ravel())[0, 1]) < 0.02


def test_nearest_template_recovers_labels():
    cfg = CorpusConfig()
    templates = label_templates(cfg, 0)
    noiseless = CorpusConfig(frame_noise=0.0)
    hits = total = 0
    for i in range(200):
        rng = derive_rng(0, "oracle", i)
        labels = [int(v) for v in rng.integers(0, cfg.vocab_size, size=int(rng.integers(cfg.min_len, cfg.max_len + 1)))]
        x = render_clean(labels, templates, cfg, derive_rng(0, "render", i))
        truth = render_clean(labels, templates, noiseless, derive_rng(0, "render", i))
        frame_labels = np.argmin(((truth[:, None, :] - templates[None]) ** 2).sum(-1), axis=1)
        guess = np.argmin(((x[:, None, :] - templates[None]) ** 2).sum(-1), axis=1)
        hits += int((guess == frame_labels).sum())
        total += frame_labels.size
    assert hits / total >= 0.99


def test_make_nomic_keeps_shape():
    f = FeatureSequence(np.ones((7, 3)), "A", "u")
    z = make_nomic(f)
    assert z.frames.shape == (7, 3) and not z.frames.any()


def test_config_validation():
    with pytest.raises(CorpusConfigError):
        CorpusConfig(min_len=5, max_len=2).validate()
    with pytest.raises(CorpusConfigError):
        CorpusConfig(streams=[StreamSpec("A"), StreamSpec("A")]).validate()
    with pytest.raises(CorpusConfigError):
        CorpusConfig.from_dict({"vocab_size": 5, "colour": "red"})
    with pytest.raises(CorpusConfigError):
        CorpusConfig.from_dict({"streams": [{"name": "A", "snr": 3}]})
    cfg = CorpusConfig.from_dict({"vocab_size": 5, "streams": [{"name": "A", "snr_db": 3.0}]})
    assert cfg.vocab_size == 5 and cfg.streams[0].snr_db == 3.0


def test_feature_sequence_rejects_empty():
    with pytest.raises(ValueError):
        FeatureSequence(np.zeros((0, 3)), "A", "u")


def test_matrix_round_trip_and_errors(tmp_path):
    m = np.random.default_rng(0).normal(size=(5, 3))
    p = tmp_path / "m.mat"
    write_matrix(p, m)
    assert np.array_equal(read_matrix(p), m)
    raw = p.read_bytes()
    (tmp_path / "t.mat").write_bytes(raw[:-8])
    with pytest.raises(DataFormatError):
        read_matrix(tmp_path / "t.mat")
    (tmp_path / "g.mat").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataFormatError):
        read_matrix(tmp_path / "g.mat")
    (tmp_path / "h.mat").write_bytes(raw[:10])
    with pytest.raises(DataFormatError):
        read_matrix(tmp_path / "h.mat")


def test_corpus_save_load_round_trip(tmp_path):
    sp = gen_corpus(SMALL, 2)
    save_corpus(sp, tmp_path)
    back = load_corpus(tmp_path)
    assert set(back) == set(sp)
    for split in sp:
        for x, y in zip(sp[split], back[split]):
            assert x.utt_id == y.utt_id and x.transcript == y.transcript
            for s in x.streams:
                assert np.array_equal(s.frames, y.stream(s.stream_id).frames)


# ---------------------------------------------------------------- SpecAugment


def test_spec_augment_zero_masks_is_identity():
    f = FeatureSequence(np.random.default_rng(0).normal(size=(9, 4)), "A", "u")
    out, mask = spec_augment(f, MaskPolicy(0, 5, 0, 5), np.random.default_rng(1), return_mask=True)
    assert np.array_equal(out.frames, f.frames)
    assert not mask.any()


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.integers(1, 12), st.integers(0, 3), st.integers(0, 15), st.integers(0, 3),
       st.integers(0, 15), st.sampled_from(["zero", "mean"]), st.integers(0, 2**32 - 1))
def test_spec_augment_changes_only_masked_cells(T, D, nt, mt, nf, mf, fill, seed):
    x = np.random.default_rng(seed).normal(size=(T, D)) + 5.0
    f = FeatureSequence(x, "A", "u")
    out, mask = spec_augment(f, MaskPolicy(nt, mt, nf, mf, fill), np.random.default_rng(seed), return_mask=True)
    assert np.array_equal(out.frames[~mask], x[~mask])
    if fill == "zero":
        assert not out.frames[mask].any()
    else:
        np.testing.assert_array_equal(out.frames[mask], np.broadcast_to(x.mean(axis=0), x.shape)[mask])
    # masks are unions of whole rows and whole columns
    rows = mask.all(axis=1)
    cols = mask.all(axis=0)
    assert np.array_equal(mask, rows[:, None] | cols[None, :])


def _cover_prob(n, max_len, k):
    """Closed-form probability that each position is covered by at least one of k spans."""
    p = np.zeros(n)
    lens = np.arange(max_len + 1)
    for L in lens:
        Lc = min(L, n)
        starts = n - Lc + 1
        for t in range(n):
            lo, hi = max(0, t - Lc + 1), min(t, n - Lc)
            covering = max(0, hi - lo + 1) if Lc > 0 else 0
            p[t] += covering / starts / (max_len + 1)
    return 1.0 - (1.0 - p) ** k


def test_spec_augment_expected_masked_count():
    T, D = 30, 12
    pol = MaskPolicy(2, 8, 2, 4)
    pt = _cover_prob(T, 8, 2)
    pf = _cover_prob(D, 4, 2)
    expected = (1.0 - np.outer(1 - pt, 1 - pf)).sum()
    rng = np.random.default_rng(0)
    f = FeatureSequence(np.ones((T, D)), "A", "u")
    counts = np.array([spec_augment(f, pol, rng, return_mask=True)[1].sum() for _ in range(10_000)])
    assert abs(counts.mean() / expected - 1) < 0.02


def test_spec_augment_two_masks_of_40_alter_at_most_80_frames():
    f = FeatureSequence(np.random.default_rng(0).normal(size=(100, 5)), "A", "u")
    pol = MaskPolicy(2, 40, 0, 0)
    worst = 0
    for seed in range(2000):
        out = spec_augment(f, pol, np.random.default_rng(seed))
        worst = max(worst, int((out.frames != f.frames).any(axis=1).sum()))
    assert 60 < worst <= 80


def test_spec_augment_clips_long_masks():
    f = FeatureSequence(np.ones((3, 2)), "A", "u")
    out = spec_augment(f, MaskPolicy(5, 40, 5, 30), np.random.default_rng(0))
    assert out.frames.shape == (3, 2)


# ---------------------------------------------------------------- stage-2 augmentation


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 4), st.integers(0, 15), st.integers(0, 2**32 - 1))
def test_stage2_mask_region_and_fill(T, E, k, max_len, seed):
    h = np.random.default_rng(seed).normal(size=(T, E))
    out, rows = stage2_time_mask(h, k, max_len, np.random.default_rng(seed + 1), return_mask=True)
    assert np.array_equal(out[~rows], h[~rows])
    mu = h.mean(axis=0)
    assert np.abs(out[rows] - mu).max(initial=0.0) <= 1e-9
    # algebraic law: the mean moves by (#masked / T) * (mu - mean of the replaced frames)
    if rows.any():
        shift = rows.sum() / T * (mu - h[rows].mean(axis=0))
    else:
        shift = np.zeros(E)
    np.testing.assert_allclose(out.mean(axis=0) - mu, shift, atol=1e-9)


def test_stage2_mean_fill_does_not_preserve_mean_in_general():
    # two frames [0], [1]; masking frame 0 with the mean 0.5 yields mean 0.75
    h = np.array([[0.0], [1.0]])
    for seed in range(200):
        out, rows = stage2_time_mask(h, 1, 1, np.random.default_rng(seed), return_mask=True)
        if rows.tolist() == [True, False]:
            assert out.mean() == pytest.approx(0.75)
            return
    pytest.fail("no draw masked exactly the first frame")


def test_stage2_mean_preserved_when_masks_cover_whole_utterance():
    h = np.random.default_rng(0).normal(size=(4, 3))
    out = stage2_time_mask(h, 40, 40, np.random.default_rng(0))
    np.testing.assert_allclose(out.mean(axis=0), h.mean(axis=0), atol=1e-12)


def test_stage2_mask_lengths_uniform_0_to_10():
    rng = np.random.default_rng(0)
    h = np.zeros((200, 1))
    h[::2] = 1.0
    lengths = []
    for _ in range(5000):
        _, rows = stage2_time_mask(h, 1, 10, rng, return_mask=True)
        lengths.append(int(rows.sum()))
    counts = np.bincount(lengths, minlength=11)
    assert counts.size == 11 and min(lengths) >= 0 and max(lengths) <= 10
    # every length in 0..10 appears close to 1/11 of the time
    assert np.all(np.abs(counts / 5000 - 1 / 11) < 0.02)


def test_stage2_mask_clipped_at_sequence_end():
    for seed in range(50):
        out, rows = stage2_time_mask(np.ones((3, 2)), 3, 10, np.random.default_rng(seed), return_mask=True)
        assert rows.size == 3 and out.shape == (3, 2)
    with pytest.raises(ValueError):
        stage2_time_mask(np.zeros((0, 2)), 1, 3, np.random.default_rng(0))


def test_input_dropout_survivor_fraction():
    h = np.ones((1000, 1000))
    out = input_dropout(h, 0.5, np.random.default_rng(0))
    assert abs((out != 0).mean() - 0.5) < 0.01
    assert set(np.unique(out)) == {0.0, 2.0}


def test_input_dropout_laws():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(400, 50))
    out = input_dropout(h, 0.5, np.random.default_rng(1))
    kept = out != 0
    np.testing.assert_allclose(out[kept], 2.0 * h[kept])
    assert abs(kept.mean() - 0.5) < 0.01
    assert np.array_equal(input_dropout(h, 0.0, rng), h)
    with pytest.raises(ValueError):
        input_dropout(h, 1.0, rng)
