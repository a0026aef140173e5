"""Label-synchronous joint CTC/attention beam search over one or more streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .attn_decoder import decoder_step, frame_attention
from .ctc import CtcPrefixState, ctc_prefix_extend_all, ctc_prefix_init, ctc_project
from .fusion import ctc_score_adaptive, ctc_score_equal, ctc_score_fixed, fuse_contexts, stream_attention
from .numcore import log_softmax

MODES = ("equal", "adaptive", "fixed")


@dataclass
class DecodeConfig:
    beam: int = 10
    lam: float = 0.3
    fusion_mode: str = "adaptive"
    fixed_weights: Optional[Tuple[float, ...]] = None
    max_output_len: Optional[int] = None  # None: 2 * (UFE length)

    def validate(self, n_streams: int) -> None:
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError(f"CTC weight {self.lam} outside [0, 1]")
        if self.fusion_mode not in MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.fusion_mode == "fixed":
            w = self.fixed_weights
            if w is None or len(w) != n_streams:
                raise ValueError(f"fixed mode needs {n_streams} weights")
            if min(w) < 0 or abs(sum(w) - 1.0) > 1e-12:
                raise ValueError(f"fixed weights {w} are not a simplex point")


def fuse_ctc(cfg: DecodeConfig, beta: Sequence[float], scores: Sequence[float]) -> float:
    if cfg.fusion_mode == "equal":
        return ctc_score_equal(scores)
    if cfg.fusion_mode == "adaptive":
        return ctc_score_adaptive(beta, scores)
    return ctc_score_fixed(cfg.fixed_weights, scores)


def mix(lam: float, att: float, ctc: float) -> float:
    """(1 - lam) * att + lam * ctc without 0 * -inf."""
    if lam == 0.0:
        return att
    if lam == 1.0:
        return ctc
    return (1.0 - lam) * att + lam * ctc


@dataclass
class Hypothesis:
    prefix: Tuple[int, ...]
    att_score: float
    ctc_states: Tuple[CtcPrefixState, ...]
    att_weights: Tuple[np.ndarray, ...]
    q: np.ndarray
    ctc_scores: Tuple[float, ...] = ()
    ctc_fused: float = 0.0
    joint: float = 0.0
    beta: Optional[np.ndarray] = None
    beta_trace: Tuple[np.ndarray, ...] = ()
    frame_trace: Tuple[Tuple[np.ndarray, ...], ...] = ()
    finished: bool = False


@dataclass
class NBestEntry:
    transcript: List[int]
    joint: float
    att: float
    ctc: float
    ctc_streams: List[float]
    beta_trace: np.ndarray  # steps x N
    frame_trace: List[np.ndarray] = field(default_factory=list)  # per stream: steps x T'
    finished: bool = True


def sort_key(joint: float, seq: Sequence[int]):
    return (-joint, tuple(seq))


def beam_search(model, hs: List[np.ndarray], cfg: DecodeConfig, nbest: Optional[int] = None) -> List[NBestEntry]:
    """Decode UFE sequences ``hs`` (one per stream) with the joint score

        joint(h) = (1 - lam) * sum_l log p_att(c_l | ...) + lam * fused_ctc(h)

    where fused_ctc combines the per-stream CTC prefix scores according to ``cfg.fusion_mode``
    using the stream weights of the step that produced the last label. No length normalization.
    Ties are broken toward the lexicographically smaller label sequence (eos sorts last).
    """
    n = len(hs)
    cfg.validate(n)
    vocab = model.vocab
    eos = vocab.eos
    U = vocab.n_labels
    location = model.cfg.attention == "location"
    atts = [model.groups[f"frame_att/{i}"] for i in range(n)]
    dec = model.groups["decoder"]
    han = model.groups["han"]
    lps = [ctc_project(model.groups[f"ctc/{i}"], H) for i, H in enumerate(hs)]
    Vhs = [H @ p.tensors["V"] for H, p in zip(hs, atts)]
    max_len = cfg.max_output_len if cfg.max_output_len is not None else 2 * max(H.shape[0] for H in hs)
    labels = np.arange(U)

    init_states = tuple(ctc_prefix_init(lp) for lp in lps)
    live = [Hypothesis(
        prefix=(),
        att_score=0.0,
        ctc_states=init_states,
        att_weights=tuple(np.full(H.shape[0], 1.0 / H.shape[0]) for H in hs),
        q=np.zeros(dec.tensors["rnn.Wh"].shape[0]),
        ctc_scores=tuple(0.0 for _ in hs),
    )]
    finished: List[Hypothesis] = []

    for step in range(max_len + 1):
        if not live:
            break
        last_step = step == max_len
        cands = []
        for hyp in live:
            ctx, new_w = [], []
            for i in range(n):
                r, a, _ = frame_attention(atts[i], hyp.q, hs[i], hyp.att_weights[i], Vhs[i], location)
                ctx.append(r)
                new_w.append(a)
            R = np.vstack(ctx)
            beta, _ = stream_attention(han, hyp.q, R)
            prev = hyp.prefix[-1] if hyp.prefix else vocab.sos
            q_new, logits, _ = decoder_step(dec, hyp.q, prev, fuse_contexts(beta, R))
            logp = log_softmax(logits)
            ext = None
            if not last_step:
                ext = [ctc_prefix_extend_all(st, lps[i], labels) for i, st in enumerate(hyp.ctc_states)]
            p_end = [st.p_end() for st in hyp.ctc_states]
            shared = (hyp, beta, q_new, tuple(new_w), ext)
            # eos candidate
            fused = fuse_ctc(cfg, beta, p_end)
            att = hyp.att_score + float(logp[eos])
            cands.append((sort_key(mix(cfg.lam, att, fused), hyp.prefix + (eos,)), eos, att, fused, tuple(p_end),
                          shared))
            if last_step:
                continue
            for c in range(U):
                scores = tuple(float(e[2][c]) for e in ext)
                fused = fuse_ctc(cfg, beta, scores)
                att = hyp.att_score + float(logp[c])
                cands.append((sort_key(mix(cfg.lam, att, fused), hyp.prefix + (c,)), c, att, fused, scores, shared))
        cands.sort(key=lambda c: c[0])
        live = []
        for key, c, att, fused, scores, (hyp, beta, q_new, new_w, ext) in cands[: cfg.beam]:
            trace_b = hyp.beta_trace + (beta,)
            trace_f = hyp.frame_trace + (new_w,)
            if c == eos:
                finished.append(Hypothesis(hyp.prefix, att, hyp.ctc_states, new_w, q_new, scores, fused, -key[0],
                                           beta, trace_b, trace_f, finished=True))
                continue
            states = tuple(CtcPrefixState(e[0][:, c].copy(), e[1][:, c].copy(), c) for e in ext)
            live.append(Hypothesis(hyp.prefix + (c,), att, states, new_w, q_new, scores, fused, -key[0],
                                   beta, trace_b, trace_f))

    pool = finished if finished else live
    pool = sorted(pool, key=lambda h: sort_key(h.joint, h.prefix + ((eos,) if h.finished else ())))
    if nbest is not None:
        pool = pool[:nbest]
    return [_entry(h, n) for h in pool]


def _entry(h: Hypothesis, n: int) -> NBestEntry:
    beta = np.vstack(h.beta_trace) if h.beta_trace else np.zeros((0, n))
    frames = [np.vstack([step[i] for step in h.frame_trace]) for i in range(n)] if h.frame_trace else []
    return NBestEntry(list(h.prefix), h.joint, h.att_score, h.ctc_fused, list(h.ctc_scores), beta, frames,
                      h.finished)
