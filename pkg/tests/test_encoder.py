import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grad_cases import COMPOSITES, encoder_case, fd_excess
from memarray.datagen import FeatureSequence, make_nomic
from memarray.encoder import UtteranceTooShort, encode, encode_forward, init_encoder, subsample_stack, unstack
from memarray.numcore import ShapeError, grad_check, derive_rng


def small_encoder(seed=0, D=3, s=4):
    return init_encoder(derive_rng(seed, "enc"), D, s, hidden=5, layers=2, out_dim=4, scale=0.5)


def test_subsample_examples():
    x = np.arange(27.0).reshape(9, 3)
    y = subsample_stack(x, 4)
    assert y.shape == (2, 12)
    assert np.array_equal(unstack(y, 4), x[:8])
    assert np.array_equal(subsample_stack(x, 1), x)
    with pytest.raises(UtteranceTooShort):
        subsample_stack(x[:3], 4)
    with pytest.raises(ValueError):
        subsample_stack(x, 0)


@pytest.mark.parametrize("T,expected", [(8, 2), (103, 25), (4, 1), (7, 1)])
def test_output_length(T, expected):
    p = small_encoder()
    assert encode_forward(p, np.zeros((T, 3)), 4)[0].shape == (expected, 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 40))
def test_output_length_law(s, extra):
    T = s + extra
    p = init_encoder(derive_rng(1, "enc"), 2, s, hidden=3, layers=1, out_dim=2)
    H, _ = encode_forward(p, np.ones((T, 2)), s)
    assert H.shape == (T // s, 2)


def test_too_short_and_wrong_dim():
    p = small_encoder()
    with pytest.raises(UtteranceTooShort):
        encode_forward(p, np.zeros((3, 3)), 4)
    with pytest.raises(ShapeError):
        encode_forward(p, np.zeros((8, 2)), 4)


def test_shared_extractor_is_universal():
    p = small_encoder()
    x = np.random.default_rng(0).normal(size=(16, 3))
    a = encode(p, FeatureSequence(x, "A", "u"))
    b = encode(p, FeatureSequence(x.copy(), "B", "u"))
    assert np.array_equal(a.frames, b.frames)
    assert (a.stream_id, b.stream_id) == ("A", "B")


def test_nomic_encodes_to_finite_features():
    p = small_encoder()
    z = make_nomic(FeatureSequence(np.ones((20, 3)), "n", "u"))
    H, cache = encode_forward(p, z.frames, 4)
    assert np.isfinite(H).all()
    # the dense front-end sees identical rows; only the recurrences vary with time
    assert np.all(cache["a0"] == cache["a0"][0])


def test_deterministic():
    p = small_encoder()
    x = np.random.default_rng(3).normal(size=(13, 3))
    assert np.array_equal(encode_forward(p, x, 4)[0], encode_forward(p, x, 4)[0])


@pytest.mark.parametrize("seed", range(100))
def test_encoder_gradient(seed):
    groups, f = encoder_case(seed)
    assert grad_check(f, groups, 1e-5) < 1e-4


@pytest.mark.parametrize("seed", range(25))
def test_two_layer_encoder_gradient(seed):
    groups, f = COMPOSITES["encoder_two_layers"](seed)
    assert fd_excess(f, groups) <= 0.0
