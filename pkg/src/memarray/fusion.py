"""Stream-level attention over per-stream contexts and the CTC score combinations used in decoding."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .numcore import Grads, ParamGroup, ShapeError, softmax_stable, uniform_init


def init_stream_attention(rng, query_dim: int, ctx_dim: int, att_dim: int, scale: float = 0.1) -> ParamGroup:
    shapes = {"Wq": (query_dim, att_dim), "V": (ctx_dim, att_dim), "b": (att_dim,), "w": (att_dim,)}
    return ParamGroup("han", uniform_init(rng, shapes, scale))


def stream_attention(p: ParamGroup, q: np.ndarray, contexts: np.ndarray):
    """Content-based weights over streams: softmax_i of w . tanh(q Wq + r_i V + b).

    Returns (beta, cache); ``contexts`` is N x E.
    """
    R = np.atleast_2d(contexts)
    if R.shape[0] < 1:
        raise ShapeError("need at least one stream")
    if R.shape[1] != p.tensors["V"].shape[0]:
        raise ShapeError(f"context dim {R.shape[1]} != {p.tensors['V'].shape[0]}")
    g = np.tanh(q @ p.tensors["Wq"] + R @ p.tensors["V"] + p.tensors["b"])
    beta = softmax_stable(g @ p.tensors["w"])
    return beta, (q, R, g, beta)


def stream_attention_backward(p: ParamGroup, cache, dbeta: np.ndarray, grads: Grads):
    """Returns (dq, dR)."""
    q, R, g, beta = cache
    de = beta * (dbeta - beta @ dbeta)
    dpre = np.outer(de, p.tensors["w"]) * (1.0 - g * g)
    dsum = dpre.sum(axis=0)
    if grads is not None:
        grads["w"] += g.T @ de
        grads["b"] += dsum
        grads["Wq"] += np.outer(q, dsum)
        grads["V"] += R.T @ dpre
    return p.tensors["Wq"] @ dsum, dpre @ p.tensors["V"].T


def fuse_contexts(beta: np.ndarray, contexts: np.ndarray) -> np.ndarray:
    R = np.atleast_2d(contexts)
    if len(beta) != R.shape[0]:
        raise ShapeError(f"{len(beta)} weights for {R.shape[0]} streams")
    return beta @ R


def _weighted(weights: Sequence[float], scores: Sequence[float]) -> float:
    # Fixed left-to-right order; zero-weight terms are skipped so a -inf score cannot produce NaN.
    if len(weights) != len(scores):
        raise ShapeError(f"{len(weights)} weights for {len(scores)} scores")
    total = 0.0
    for w, a in zip(weights, scores):
        if w != 0.0:
            total += float(w) * float(a)
    return total


def ctc_score_equal(scores: Sequence[float]) -> float:
    """Arithmetic mean of per-stream prefix scores."""
    n = len(scores)
    if n < 1:
        raise ValueError("no scores")
    return _weighted([1.0 / n] * n, scores)


def ctc_score_adaptive(beta: Sequence[float], scores: Sequence[float]) -> float:
    """Per-stream prefix scores weighted by the stream-attention vector of the current step."""
    return _weighted(beta, scores)


def ctc_score_fixed(weights: Sequence[float], scores: Sequence[float]) -> float:
    return _weighted(weights, scores)
