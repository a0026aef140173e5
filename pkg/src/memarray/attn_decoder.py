"""Location-aware frame attention, the recurrent label decoder, and the teacher-forced attention loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .fusion import fuse_contexts, stream_attention, stream_attention_backward
from .numcore import (
    Grads,
    ParamGroup,
    ShapeError,
    gru_cell_backward,
    gru_cell_step,
    gru_shapes,
    log_softmax,
    softmax_stable,
    uniform_init,
)


@dataclass(frozen=True)
class OutputVocab:
    """Labels 0..n-1 followed by sos and eos. Blank is not part of this vocabulary."""

    n_labels: int

    def __post_init__(self):
        if self.n_labels < 2:
            raise ValueError("need at least 2 labels")

    @property
    def sos(self) -> int:
        return self.n_labels

    @property
    def eos(self) -> int:
        return self.n_labels + 1

    def __len__(self) -> int:
        return self.n_labels + 2


# ---------------------------------------------------------------- frame-level attention

def init_frame_attention(rng, query_dim: int, enc_dim: int, att_dim: int, filters: int = 4, width: int = 8,
                         name: str = "frame_att/0", scale: float = 0.1) -> ParamGroup:
    shapes = {
        "Wq": (query_dim, att_dim),
        "V": (enc_dim, att_dim),
        "b": (att_dim,),
        "w": (att_dim,),
        "K": (filters, width),
        "U": (filters, att_dim),
    }
    return ParamGroup(name, uniform_init(rng, shapes, scale))


def _windows(a_prev: np.ndarray, width: int):
    left = width // 2
    pad = np.concatenate([np.zeros(left), a_prev, np.zeros(width - 1 - left)])
    idx = np.arange(a_prev.size)[:, None] + np.arange(width)[None, :]
    return pad[idx], idx, left


def frame_attention(p: ParamGroup, q: np.ndarray, H: np.ndarray, a_prev: np.ndarray,
                    Vh: Optional[np.ndarray] = None, location: bool = True):
    """Context r = sum_t a_t h_t with a = softmax_t(w . tanh(q Wq + h_t V + conv(a_prev)_t U + b)).

    ``Vh`` (= H V) may be precomputed once per utterance. Returns (r, a, cache).
    """
    if a_prev.shape != (H.shape[0],):
        raise ShapeError(f"previous weights have length {a_prev.shape}, sequence has {H.shape[0]} frames")
    if Vh is None:
        Vh = H @ p.tensors["V"]
    pre = Vh + (q @ p.tensors["Wq"] + p.tensors["b"])
    win = conv = None
    if location:
        win, idx, left = _windows(a_prev, p.tensors["K"].shape[1])
        conv = win @ p.tensors["K"].T
        pre = pre + conv @ p.tensors["U"]
    g = np.tanh(pre)
    a = softmax_stable(g @ p.tensors["w"])
    r = a @ H
    return r, a, (q, H, g, a, win, conv, location)


def frame_attention_backward(p: ParamGroup, cache, dr: np.ndarray, da: Optional[np.ndarray], grads: Grads):
    """Returns (dq, dH, dVh, da_prev). ``dH`` excludes the path through ``Vh``."""
    q, H, g, a, win, conv, location = cache
    dH = np.outer(a, dr)
    dA = H @ dr
    if da is not None:
        dA = dA + da
    de = a * (dA - a @ dA)
    w = p.tensors["w"]
    dpre = np.outer(de, w) * (1.0 - g * g)
    dsum = dpre.sum(axis=0)
    if grads is not None:
        grads["w"] += g.T @ de
        grads["b"] += dsum
        grads["Wq"] += np.outer(q, dsum)
    dq = p.tensors["Wq"] @ dsum
    da_prev = None
    if location:
        K = p.tensors["K"]
        dconv = dpre @ p.tensors["U"].T
        if grads is not None:
            grads["U"] += conv.T @ dpre
            grads["K"] += dconv.T @ win
        dwin = dconv @ K
        width = K.shape[1]
        left = width // 2
        dpad = np.zeros(a.size + width - 1)
        idx = np.arange(a.size)[:, None] + np.arange(width)[None, :]
        np.add.at(dpad, idx, dwin)
        da_prev = dpad[left:left + a.size]
    return dq, dH, dpre, da_prev


# ---------------------------------------------------------------- decoder

def init_decoder(rng, vocab: OutputVocab, ctx_dim: int, hidden: int = 64, emb_dim: int = 32,
                 scale: float = 0.1) -> ParamGroup:
    shapes = {"emb": (len(vocab), emb_dim), "out.W": (hidden, len(vocab)), "out.b": (len(vocab),)}
    shapes.update(gru_shapes(emb_dim + ctx_dim, hidden, "rnn."))
    return ParamGroup("decoder", uniform_init(rng, shapes, scale))


def decoder_step(p: ParamGroup, q: np.ndarray, prev_label: int, r: np.ndarray):
    """One recurrent step on [embed(prev_label); r]; returns (new state, logits, cache)."""
    emb = p.tensors["emb"]
    if not (0 <= prev_label < emb.shape[0]):
        raise ValueError(f"label id {prev_label} outside output vocabulary of size {emb.shape[0]}")
    x = np.concatenate([emb[prev_label], r])
    q_new, gcache = gru_cell_step(p, q, x, "rnn.")
    logits = q_new @ p.tensors["out.W"] + p.tensors["out.b"]
    return q_new, logits, (x, prev_label, q_new, gcache)


def decoder_step_backward(p: ParamGroup, cache, dq_new: np.ndarray, dlogits: np.ndarray, grads: Grads):
    """Returns (dq, dr)."""
    x, prev_label, q_new, gcache = cache
    dq_new = dq_new + p.tensors["out.W"] @ dlogits
    if grads is not None:
        grads["out.W"] += np.outer(q_new, dlogits)
        grads["out.b"] += dlogits
    dq, dpre = gru_cell_backward(p, gcache, dq_new, grads, "rnn.")
    dx = p.tensors["rnn.Wx"] @ dpre
    E = p.tensors["emb"].shape[1]
    if grads is not None:
        grads["rnn.Wx"] += np.outer(x, dpre)
        grads["rnn.b"] += dpre
        grads["emb"][prev_label] += dx[:E]
    return dq, dx[E:]


def label_smoothing_loss(logits: np.ndarray, target: int, weight: float, unigram: Optional[np.ndarray] = None):
    """Cross-entropy against (1 - weight) onehot(target) + weight * unigram. Returns (loss, dlogits)."""
    if not (0.0 <= weight < 1.0):
        raise ValueError(f"smoothing weight {weight} outside [0, 1)")
    V = logits.shape[0]
    if weight == 0.0:
        t = np.zeros(V)
    elif unigram is None:
        t = np.full(V, weight / V)
    else:
        t = weight * np.asarray(unigram, dtype=np.float64)
    t[target] += 1.0 - weight
    lp = log_softmax(logits)
    nz = t > 0
    loss = float(-(t[nz] @ lp[nz]))
    return loss, np.exp(lp) - t


def unigram_distribution(transcripts: Sequence[Sequence[int]], vocab: OutputVocab) -> np.ndarray:
    """Label frequencies over the output vocabulary, one eos per transcript, never sos."""
    counts = np.zeros(len(vocab))
    for tr in transcripts:
        np.add.at(counts, np.asarray(tr, dtype=np.int64), 1.0)
        counts[vocab.eos] += 1.0
    return counts / counts.sum()


# ---------------------------------------------------------------- teacher-forced objective

def attention_seq_loss(model, hs: List[np.ndarray], labels: Sequence[int], ls_weight: float = 0.0,
                       unigram: Optional[np.ndarray] = None, grads=None, return_dh: bool = False,
                       grad_scale: float = 1.0):
    """Mean label-smoothed cross-entropy over labels + eos under teacher forcing.

    ``hs`` holds one UFE matrix per stream; stream i uses ``frame_att/i`` and the contexts are fused
    by the stream attention. ``grads`` is a GradStore (or None for forward only). With
    ``return_dh`` the gradients with respect to each ``hs[i]`` are returned too. Gradients are
    multiplied by ``grad_scale``.
    """
    if len(labels) < 1:
        raise ValueError("empty transcript")
    vocab = model.vocab
    dec = model.groups["decoder"]
    han = model.groups["han"]
    atts = [model.groups[f"frame_att/{i}"] for i in range(len(hs))]
    location = model.cfg.attention == "location"
    inputs = [vocab.sos] + list(labels)
    targets = list(labels) + [vocab.eos]
    n_steps = len(targets)

    Vhs = [H @ p.tensors["V"] for H, p in zip(hs, atts)]
    q = np.zeros(dec.tensors["rnn.Wh"].shape[0])
    a_prev = [np.full(H.shape[0], 1.0 / H.shape[0]) for H in hs]
    steps = []
    total = 0.0
    for l in range(n_steps):
        ctx, fcaches = [], []
        for i, (H, p) in enumerate(zip(hs, atts)):
            r, a_prev[i], fc = frame_attention(p, q, H, a_prev[i], Vhs[i], location)
            ctx.append(r)
            fcaches.append(fc)
        R = np.vstack(ctx)
        beta, hcache = stream_attention(han, q, R)
        fused = fuse_contexts(beta, R)
        q, logits, dcache = decoder_step(dec, q, inputs[l], fused)
        loss, dlogits = label_smoothing_loss(logits, targets[l], ls_weight, unigram)
        total += loss
        steps.append((fcaches, R, beta, hcache, dcache, dlogits))
    total /= n_steps
    if grads is None and not return_dh:
        return total

    g = (lambda name: grads.get(name)) if grads is not None else (lambda name: None)
    dHs = [np.zeros_like(H) for H in hs]
    dVhs = [np.zeros_like(Vh) for Vh in Vhs]
    dq = np.zeros_like(q)
    da = [None] * len(hs)
    scale = grad_scale / n_steps
    for l in range(n_steps - 1, -1, -1):
        fcaches, R, beta, hcache, dcache, dlogits = steps[l]
        dq_prev, dfused = decoder_step_backward(dec, dcache, dq, dlogits * scale, g("decoder"))
        dR = np.outer(beta, dfused)
        dq_h, dR_h = stream_attention_backward(han, hcache, R @ dfused, g("han"))
        dR += dR_h
        dq_prev += dq_h
        for i, p in enumerate(atts):
            dq_i, dH_i, dVh_i, da[i] = frame_attention_backward(p, fcaches[i], dR[i], da[i], g(p.name))
            dq_prev += dq_i
            dHs[i] += dH_i
            dVhs[i] += dVh_i
        dq = dq_prev
    for i, p in enumerate(atts):
        gi = g(p.name)
        if gi is not None:
            gi["V"] += hs[i].T @ dVhs[i]
        dHs[i] += dVhs[i] @ p.tensors["V"].T
    return (total, dHs) if return_dh else total
