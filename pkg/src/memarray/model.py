"""Parameter container for the multi-stream model and the joint CTC/attention objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import ctc as ctcmod
from .attn_decoder import OutputVocab, attention_seq_loss, init_decoder, init_frame_attention
from .encoder import encode_backward, encode_forward, init_encoder
from .fusion import init_stream_attention
from .numcore import GradStore, ParamGroup, derive_rng


@dataclass
class ModelConfig:
    vocab_size: int = 12
    feat_dim: int = 20
    subsample: int = 4
    enc_hidden: int = 64
    enc_layers: int = 2
    enc_dim: int = 64
    att_dim: int = 32
    conv_filters: int = 4
    conv_width: int = 8
    attention: str = "location"  # or "content": drops the convolution term
    dec_hidden: int = 64
    emb_dim: int = 32
    han_dim: int = 32
    init_scale: float = 0.1

    def validate(self) -> None:
        if self.attention not in ("location", "content"):
            raise ValueError(f"unknown attention type {self.attention!r}")
        if self.vocab_size < 2 or self.subsample < 1:
            raise ValueError("vocab_size >= 2 and subsample >= 1 required")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        extra = sorted(set(d) - set(cls.__dataclass_fields__))
        if extra:
            raise ValueError(f"unknown key(s) in model config: {extra}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Model:
    cfg: ModelConfig
    groups: Dict[str, ParamGroup]
    unigram: Optional[np.ndarray] = None
    meta: Dict = field(default_factory=dict)

    @property
    def vocab(self) -> OutputVocab:
        return OutputVocab(self.cfg.vocab_size)

    @property
    def n_streams(self) -> int:
        return sum(1 for k in self.groups if k.startswith("frame_att/"))

    def copy(self) -> "Model":
        return Model(self.cfg, {k: g.copy() for k, g in self.groups.items()},
                     None if self.unigram is None else self.unigram.copy(), dict(self.meta))

    def expand_streams(self, n: int) -> "Model":
        """Model with ``n`` per-stream frame-attention/CTC groups, all cloned from stream 0."""
        m = self.copy()
        for k in [k for k in m.groups if k.startswith(("frame_att/", "ctc/")) and not k.endswith("/0")]:
            del m.groups[k]
        for i in range(1, n):
            for base in ("frame_att", "ctc"):
                m.groups[f"{base}/{i}"] = m.groups[f"{base}/0"].copy(f"{base}/{i}")
        return m

    def set_trainable(self, names: Sequence[str]) -> None:
        for k, g in self.groups.items():
            g.frozen = k not in names

    def encode(self, frames: np.ndarray) -> np.ndarray:
        return encode_forward(self.groups["encoder"], frames, self.cfg.subsample)[0]


def init_model(cfg: ModelConfig, seed: int) -> Model:
    cfg.validate()
    vocab = OutputVocab(cfg.vocab_size)
    s = cfg.init_scale
    groups = {
        "encoder": init_encoder(derive_rng(seed, "init", "encoder"), cfg.feat_dim, cfg.subsample, cfg.enc_hidden,
                                cfg.enc_layers, cfg.enc_dim, s),
        "frame_att/0": init_frame_attention(derive_rng(seed, "init", "frame_att"), cfg.dec_hidden, cfg.enc_dim,
                                            cfg.att_dim, cfg.conv_filters, cfg.conv_width, "frame_att/0", s),
        "ctc/0": ctcmod.init_ctc(derive_rng(seed, "init", "ctc"), cfg.enc_dim, cfg.vocab_size, "ctc/0", s),
        "decoder": init_decoder(derive_rng(seed, "init", "decoder"), vocab, cfg.enc_dim, cfg.dec_hidden,
                                cfg.emb_dim, s),
        "han": init_stream_attention(derive_rng(seed, "init", "han"), cfg.dec_hidden, cfg.enc_dim, cfg.han_dim, s),
    }
    return Model(cfg, groups)


def ctc_branch(model: Model, hs: List[np.ndarray], labels: Sequence[int], grads: Optional[GradStore] = None,
               scale: float = 1.0, need_dh: bool = False):
    """Equal-weight mean of per-stream CTC losses; returns (loss, per-stream dH or None)."""
    n = len(hs)
    total = 0.0
    dhs = []
    for i, H in enumerate(hs):
        p = model.groups[f"ctc/{i}"]
        lp = ctcmod.ctc_project(p, H)
        g = grads.get(p.name) if grads is not None else None
        if g is None and not need_dh:
            total += ctcmod.ctc_forward_loss(lp, labels)
            continue
        loss, dlp = ctcmod.ctc_loss_and_grad(lp, labels)
        total += loss
        dhs.append(ctcmod.ctc_project_backward(p, H, lp, dlp * (scale / n), g))
    return total / n, (dhs if need_dh else None)


def joint_loss(model: Model, hs: List[np.ndarray], labels: Sequence[int], lam: float, ls_weight: float = 0.0,
               grads: Optional[GradStore] = None, need_dh: bool = False):
    """lam * mean_i CTC_i + (1 - lam) * attention loss.

    Gradients accumulate into ``grads`` (frozen groups are skipped). Returns (loss, parts) or,
    with ``need_dh``, (loss, parts, dhs) where dhs are gradients on the UFE inputs.
    """
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"CTC weight {lam} outside [0, 1]")
    if need_dh and grads is None:
        raise ValueError("need_dh requires a GradStore")
    dhs = [np.zeros_like(H) for H in hs] if need_dh else None
    ctc_loss = att_loss = 0.0
    if lam > 0.0:
        ctc_loss, cdh = ctc_branch(model, hs, labels, grads, lam, need_dh)
        if need_dh:
            for i, d in enumerate(cdh):
                dhs[i] += d
    if lam < 1.0:
        if grads is None:
            att_loss = attention_seq_loss(model, hs, labels, ls_weight, model.unigram)
        else:
            att_loss, adh = attention_seq_loss(model, hs, labels, ls_weight, model.unigram, grads,
                                               return_dh=True, grad_scale=1.0 - lam)
            if need_dh:
                for i, d in enumerate(adh):
                    dhs[i] += d
    loss = lam * ctc_loss + (1.0 - lam) * att_loss
    parts = {"ctc": ctc_loss, "att": att_loss}
    return (loss, parts, dhs) if need_dh else (loss, parts)


def stage1_loss(model: Model, frames: np.ndarray, labels: Sequence[int], lam: float, ls_weight: float = 0.0,
                grads: Optional[GradStore] = None):
    """Single-stream objective from raw features, backpropagating into the encoder when ``grads`` is given."""
    enc = model.groups["encoder"]
    H, cache = encode_forward(enc, frames, model.cfg.subsample)
    if grads is None:
        return joint_loss(model, [H], labels, lam, ls_weight)
    loss, parts, dhs = joint_loss(model, [H], labels, lam, ls_weight, grads, need_dh=True)
    if grads.get("encoder") is not None:
        encode_backward(enc, cache, dhs[0], grads["encoder"])
    return loss, parts
