"""Universal feature extractor: frame stacking, dense front-end, stacked BiGRU with projections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import (
    Grads,
    ParamGroup,
    ShapeError,
    gru_sequence_backward,
    gru_sequence_forward,
    gru_shapes,
    uniform_init,
)


class UtteranceTooShort(ValueError):
    pass


@dataclass
class UfeSequence:
    frames: np.ndarray  # floor(T/s) x E
    stream_id: str
    utt_id: str


def subsample_stack(x: np.ndarray, s: int) -> np.ndarray:
    """Concatenate each block of ``s`` frames into one row; a trailing partial block is dropped."""
    x = np.asarray(x)
    if s < 1:
        raise ValueError("subsampling factor must be >= 1")
    T, D = x.shape
    if T < s:
        raise UtteranceTooShort(f"{T} frames < subsampling factor {s}")
    n = T // s
    return x[: n * s].reshape(n, s * D)


def unstack(y: np.ndarray, s: int) -> np.ndarray:
    n, sd = y.shape
    return y.reshape(n * s, sd // s)


def encoder_shapes(feat_dim: int, subsample: int, hidden: int, layers: int, out_dim: int) -> dict:
    shapes = {"front.W": (subsample * feat_dim, hidden), "front.b": (hidden,)}
    n_in = hidden
    for k in range(layers):
        shapes.update(gru_shapes(n_in, hidden, f"l{k}.fwd."))
        shapes.update(gru_shapes(n_in, hidden, f"l{k}.bwd."))
        proj = out_dim if k == layers - 1 else hidden
        shapes[f"l{k}.proj.W"] = (2 * hidden, proj)
        shapes[f"l{k}.proj.b"] = (proj,)
        n_in = proj
    return shapes


def init_encoder(rng, feat_dim: int, subsample: int = 4, hidden: int = 64, layers: int = 2, out_dim: int = 64,
                 scale: float = 0.1) -> ParamGroup:
    return ParamGroup("encoder", uniform_init(rng, encoder_shapes(feat_dim, subsample, hidden, layers, out_dim), scale))


def _layers(p: ParamGroup) -> int:
    return sum(1 for k in p.tensors if k.endswith(".proj.W"))


def encode_forward(p: ParamGroup, frames: np.ndarray, s: int):
    """Returns (H, cache). H has exactly floor(T/s) rows."""
    W = p.tensors["front.W"]
    if frames.shape[1] * s != W.shape[0]:
        raise ShapeError(f"encoder expects feature dim {W.shape[0] // s}, got {frames.shape[1]}")
    x = subsample_stack(frames, s)
    a = np.tanh(x @ W + p.tensors["front.b"])
    cache = {"x": x, "a0": a, "layers": []}
    inp = a
    for k in range(_layers(p)):
        hf, cf = gru_sequence_forward(p, inp, f"l{k}.fwd.")
        hb, cb = gru_sequence_forward(p, inp, f"l{k}.bwd.", reverse=True)
        cat = np.concatenate([hf, hb], axis=1)
        out = np.tanh(cat @ p.tensors[f"l{k}.proj.W"] + p.tensors[f"l{k}.proj.b"])
        cache["layers"].append((inp, cf, cb, cat, out))
        inp = out
    return inp, cache


def encode_backward(p: ParamGroup, cache, dH: np.ndarray, grads: Grads) -> None:
    d = dH
    for k in range(_layers(p) - 1, -1, -1):
        inp, cf, cb, cat, out = cache["layers"][k]
        dpre = d * (1.0 - out * out)
        if grads is not None:
            grads[f"l{k}.proj.W"] += cat.T @ dpre
            grads[f"l{k}.proj.b"] += dpre.sum(axis=0)
        dcat = dpre @ p.tensors[f"l{k}.proj.W"].T
        Hd = dcat.shape[1] // 2
        d = gru_sequence_backward(p, inp, cf, dcat[:, :Hd], grads, f"l{k}.fwd.")
        d = d + gru_sequence_backward(p, inp, cb, dcat[:, Hd:], grads, f"l{k}.bwd.", reverse=True)
    a = cache["a0"]
    dpre = d * (1.0 - a * a)
    if grads is not None:
        grads["front.W"] += cache["x"].T @ dpre
        grads["front.b"] += dpre.sum(axis=0)


def encode(p: ParamGroup, f, subsample: int = 4) -> UfeSequence:
    """Encode a FeatureSequence into its UFE sequence."""
    H, _ = encode_forward(p, f.frames, subsample)
    return UfeSequence(H, f.stream_id, f.utt_id)
