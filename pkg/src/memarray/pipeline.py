"""Two-stage training: single-stream joint training, UFE extraction, stream-attention-only training."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attn_decoder import unigram_distribution
from .datagen import (
    FeatureSequence,
    MaskPolicy,
    StreamBundle,
    input_dropout,
    read_matrix,
    spec_augment,
    stage2_time_mask,
    write_matrix,
)
from .fusion import init_stream_attention
from .model import Model, ModelConfig, init_model, joint_loss, stage1_loss
from .numcore import GradStore, NumericError, ParamGroup, derive_rng

log = logging.getLogger(__name__)

class FrozenMutation(RuntimeError):
    """A frozen parameter group changed during training."""


class TrainingDiverged(NumericError):
    pass


class UpstreamMismatch(ValueError):
    pass


# ---------------------------------------------------------------- configuration

@dataclass
class TrainConfig:
    lam: float = 0.2
    epochs: int = 30
    patience: int = 3
    batch_size: int = 8
    optimizer: str = "adadelta"
    rho: float = 0.95
    eps: float = 1e-8
    lr: float = 1.0
    grad_clip: float = 5.0
    ls_weight: float = 0.05
    seed: int = 0
    spec_augment: Optional[MaskPolicy] = None
    time_masks: int = 0
    time_mask_len: int = 10
    dropout: float = 0.0
    data_fraction: float = 1.0

    def validate(self) -> None:
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lam must be in [0, 1]")
        if self.patience > self.epochs:
            raise ValueError("patience must not exceed epochs")
        if not (0.0 < self.data_fraction <= 1.0):
            raise ValueError("data_fraction must be in (0, 1]")
        if self.optimizer not in ("adadelta", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.time_masks and self.dropout:
            raise ValueError("choose time masking or input dropout, not both")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be >= 1")
        if not (0.0 <= self.rho < 1.0) or self.eps <= 0.0 or self.lr <= 0.0 or self.grad_clip < 0.0:
            raise ValueError("need 0 <= rho < 1, eps > 0, lr > 0, grad_clip >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        extra = sorted(set(d) - set(cls.__dataclass_fields__))
        if extra:
            raise ValueError(f"unknown key(s) in train config: {extra}")
        sa = d.pop("spec_augment", None)
        cfg = cls(**d)
        if sa is not None:
            extra = sorted(set(sa) - set(MaskPolicy.__dataclass_fields__))
            if extra:
                raise ValueError(f"unknown key(s) in spec_augment: {extra}")
            cfg.spec_augment = MaskPolicy(**sa)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return config_digest(self.to_dict())


def config_digest(obj) -> str:
    """Short hash of a JSON-serializable configuration."""
    return hashlib.sha256(_canonical(obj).encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------- optimizers

class AdaDelta:
    def __init__(self, rho: float = 0.95, eps: float = 1e-8, lr: float = 1.0):
        self.rho, self.eps, self.lr = rho, eps, lr
        self.eg: Dict[Tuple[str, str], np.ndarray] = {}
        self.edx: Dict[Tuple[str, str], np.ndarray] = {}

    def step(self, groups: Dict[str, ParamGroup], grads: GradStore) -> None:
        rho, eps = self.rho, self.eps
        for name in sorted(groups):
            g = grads[name]
            if g is None:
                continue
            for key in sorted(g):
                k = (name, key)
                grad = g[key]
                eg = self.eg.setdefault(k, np.zeros_like(grad))
                edx = self.edx.setdefault(k, np.zeros_like(grad))
                eg *= rho
                eg += (1.0 - rho) * grad * grad
                dx = -np.sqrt(edx + eps) / np.sqrt(eg + eps) * grad
                edx *= rho
                edx += (1.0 - rho) * dx * dx
                groups[name].tensors[key] += self.lr * dx


class SGD:
    def __init__(self, lr: float = 0.1):
        self.lr = lr

    def step(self, groups: Dict[str, ParamGroup], grads: GradStore) -> None:
        for name in sorted(groups):
            g = grads[name]
            if g is None:
                continue
            for key in sorted(g):
                groups[name].tensors[key] -= self.lr * g[key]


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adadelta":
        return AdaDelta(cfg.rho, cfg.eps, cfg.lr)
    return SGD(cfg.lr)


def group_digest(g: ParamGroup) -> str:
    h = hashlib.sha256()
    for k in sorted(g.tensors):
        h.update(k.encode())
        h.update(np.ascontiguousarray(g.tensors[k], dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- generic loop

@dataclass
class TrainResult:
    model: Model
    best_epoch: int
    history: List[dict] = field(default_factory=list)


def _run_epochs(model: Model, cfg: TrainConfig, n_train: int, sample_loss, dev_loss, tag: str) -> TrainResult:
    """Mini-batch loop with early stopping on dev loss.

    ``sample_loss(model, idx, epoch, grads)`` accumulates gradients for training item ``idx``.
    Items are shuffled per epoch; within a batch gradients are summed in ascending item order
    (so the floating-point reduction order never depends on the shuffle), then averaged.
    """
    opt = make_optimizer(cfg)
    frozen = {k: group_digest(g) for k, g in model.groups.items() if g.frozen}
    best = (np.inf, 0, model.copy())
    history = []
    grads = GradStore(model.groups)
    bad = 0
    for epoch in range(1, cfg.epochs + 1):
        order = derive_rng(cfg.seed, tag, "shuffle", epoch).permutation(n_train)
        tot = 0.0
        for start in range(0, n_train, cfg.batch_size):
            batch = np.sort(order[start:start + cfg.batch_size])
            grads.zero()
            for idx in batch:
                loss = sample_loss(model, int(idx), epoch, grads)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"{tag}: non-finite loss at epoch {epoch}, item {idx}")
                tot += loss
            grads.scale(1.0 / len(batch))
            norm = grads.global_norm()
            if not np.isfinite(norm):
                raise TrainingDiverged(f"{tag}: non-finite gradient at epoch {epoch}")
            if cfg.grad_clip and norm > cfg.grad_clip:
                grads.scale(cfg.grad_clip / norm)
            opt.step(model.groups, grads)
        dl = dev_loss(model)
        history.append({"epoch": epoch, "train_loss": tot / max(n_train, 1), "dev_loss": dl})
        log.info("%s epoch %d train %.4f dev %.4f", tag, epoch, tot / max(n_train, 1), dl)
        if dl < best[0]:
            best = (dl, epoch, model.copy())
            bad = 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    for k, d in frozen.items():
        if group_digest(model.groups[k]) != d:
            raise FrozenMutation(f"frozen group {k} changed during {tag}")
    out = best[2]
    out.meta.update({"best_epoch": best[1], "best_dev_loss": best[0]})
    return TrainResult(out, best[1], history)


# ---------------------------------------------------------------- stage 1

def single_stream_view(bundles: Sequence[StreamBundle], streams: Sequence[str]):
    """Pool every listed stream of every utterance as an independent single-stream sample."""
    return [(b.utt_id, s, b.stream(s).frames, list(b.transcript)) for b in bundles for s in streams]


def train_stage1(train: Sequence[StreamBundle], dev: Sequence[StreamBundle], streams: Sequence[str],
                 model_cfg: ModelConfig, cfg: TrainConfig) -> TrainResult:
    cfg.validate()
    samples = single_stream_view(train, streams)
    dev_samples = single_stream_view(dev, streams)
    if not samples:
        raise ValueError("empty training corpus")
    model = init_model(model_cfg, cfg.seed)
    model.unigram = unigram_distribution([s[3] for s in samples], model.vocab)
    model.set_trainable(["encoder", "frame_att/0", "ctc/0", "decoder"])

    def sample_loss(m, idx, epoch, grads):
        utt, stream, frames, labels = samples[idx]
        if cfg.spec_augment is not None:
            rng = derive_rng(cfg.seed, "specaug", epoch, utt, stream)
            frames = spec_augment_frames(frames, cfg.spec_augment, rng)
        return stage1_loss(m, frames, labels, cfg.lam, cfg.ls_weight, grads)[0]

    def dev_loss(m):
        if not dev_samples:
            return 0.0
        return float(np.mean([stage1_loss(m, f, lab, cfg.lam, cfg.ls_weight)[0] for _, _, f, lab in dev_samples]))

    res = _run_epochs(model, cfg, len(samples), sample_loss, dev_loss, "stage1")
    res.model.meta.update({"stage": 1, "seed": cfg.seed, "train_config": cfg.to_dict(), "streams": list(streams),
                           "config_hash": config_digest({"model": model_cfg.to_dict(), "train": cfg.to_dict()})})
    return res


def spec_augment_frames(frames: np.ndarray, policy: MaskPolicy, rng) -> np.ndarray:
    return spec_augment(FeatureSequence(frames, "", ""), policy, rng).frames


# ---------------------------------------------------------------- UFE extraction

@dataclass
class UfeItem:
    utt_id: str
    hs: Dict[str, np.ndarray]
    transcript: List[int]

    def select(self, streams: Sequence[str]) -> List[np.ndarray]:
        return [self.hs[s] for s in streams]


def encode_corpus(model: Model, bundles: Sequence[StreamBundle], streams: Optional[Sequence[str]] = None
                  ) -> List[UfeItem]:
    """Run the extractor once per stream of every utterance."""
    if model.meta.get("stage", 1) < 1:
        raise ValueError("UFE extraction needs a trained stage-1 model")
    out = []
    for b in bundles:
        names = streams if streams is not None else [s.stream_id for s in b.streams]
        hs = {}
        for s in names:
            f = b.stream(s)
            if f.D != model.cfg.feat_dim:
                raise ValueError(f"{b.utt_id}/{s}: feature dim {f.D} != model feature dim {model.cfg.feat_dim}")
            hs[s] = model.encode(f.frames)
        out.append(UfeItem(b.utt_id, hs, list(b.transcript)))
    return out


def extract_ufe(model: Model, splits: Dict[str, Sequence[StreamBundle]], root, ckpt_hash: str,
                streams: Optional[Sequence[str]] = None, extra: Optional[dict] = None) -> dict:
    """Encode every stream of every utterance and write the matrices plus a manifest to ``root``."""
    root = Path(root)
    manifest = {**(extra or {}), "checkpoint": ckpt_hash, "subsample": model.cfg.subsample, "splits": {}}
    for split, bundles in splits.items():
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        entries = {}
        for item in encode_corpus(model, bundles, streams):
            files = {}
            for s, H in item.hs.items():
                fn = f"{item.utt_id}.{s}.ufe"
                write_matrix(d / fn, H)
                files[s] = fn
            entries[item.utt_id] = {"streams": files, "transcript": item.transcript}
        manifest["splits"][split] = entries
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_ufe(root, split: str, expect_checkpoint: Optional[str] = None) -> List[UfeItem]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if expect_checkpoint is not None and manifest["checkpoint"] != expect_checkpoint:
        raise UpstreamMismatch(
            f"UFE features in {root} come from checkpoint {manifest['checkpoint']}, expected {expect_checkpoint}")
    entries = manifest["splits"][split]
    return [UfeItem(u, {s: read_matrix(root / split / fn) for s, fn in entries[u]["streams"].items()},
                    list(entries[u]["transcript"])) for u in sorted(entries)]


# ---------------------------------------------------------------- stage 2

def stage2_augment(h: np.ndarray, cfg: TrainConfig, rng) -> np.ndarray:
    if cfg.time_masks:
        return stage2_time_mask(h, cfg.time_masks, cfg.time_mask_len, rng)
    if cfg.dropout:
        return input_dropout(h, cfg.dropout, rng)
    return h


def subset(items: Sequence, fraction: float, seed: int) -> list:
    if fraction >= 1.0:
        return list(items)
    k = max(1, int(round(fraction * len(items))))
    idx = np.sort(derive_rng(seed, "fraction").permutation(len(items))[:k])
    return [items[i] for i in idx]


def train_stage2(train: Sequence[UfeItem], dev: Sequence[UfeItem], streams: Sequence[str], stage1: Model,
                 cfg: TrainConfig) -> TrainResult:
    """Train only the stream attention on precomputed UFE features; everything else stays frozen."""
    cfg.validate()
    if len(streams) < 2:
        raise ValueError("stage 2 needs at least two target streams")
    if stage1.meta.get("stage") != 1:
        raise ValueError("stage 2 must start from a stage-1 model")
    model = stage1.expand_streams(len(streams))
    mc = model.cfg
    model.groups["han"] = init_stream_attention(derive_rng(cfg.seed, "init", "stage2", "han"), mc.dec_hidden,
                                                mc.enc_dim, mc.han_dim, mc.init_scale)
    model.set_trainable(["han"])
    before = {k: group_digest(g) for k, g in model.groups.items() if k != "han"}
    items = subset(train, cfg.data_fraction, cfg.seed)

    def sample_loss(m, idx, epoch, grads):
        it = items[idx]
        hs = [stage2_augment(it.hs[s], cfg, derive_rng(cfg.seed, "stage2aug", epoch, it.utt_id, s)) for s in streams]
        return joint_loss(m, hs, it.transcript, cfg.lam, cfg.ls_weight, grads)[0]

    def dev_loss(m):
        if not dev:
            return 0.0
        return float(np.mean([joint_loss(m, it.select(streams), it.transcript, cfg.lam, cfg.ls_weight)[0]
                              for it in dev]))

    res = _run_epochs(model, cfg, len(items), sample_loss, dev_loss, "stage2")
    for k, d in before.items():
        if group_digest(res.model.groups[k]) != d:
            raise FrozenMutation(f"transferred group {k} differs from its stage-1 value")
    res.model.meta.update({"stage": 2, "seed": cfg.seed, "train_config": cfg.to_dict(), "streams": list(streams),
                           "n_train_items": len(items),
                           "config_hash": config_digest({"stage1": stage1.meta.get("config_hash"),
                                                         "train": cfg.to_dict()})})
    return res


# ---------------------------------------------------------------- checkpoints
#
# Layout: b"MEMACKPT" | u32 version | u64 header length | JSON header | f64 LE payload | sha256 of all prior bytes

CKPT_MAGIC = b"MEMACKPT"
CKPT_VERSION = 1
_PRE = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def serialize_model(model: Model) -> bytes:
    groups = []
    chunks = []
    offset = 0
    for name in sorted(model.groups):
        g = model.groups[name]
        tensors = []
        for k in sorted(g.tensors):
            arr = np.ascontiguousarray(g.tensors[k], dtype="<f8")
            tensors.append({"name": k, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.size
        groups.append({"name": name, "frozen": bool(g.frozen), "tensors": tensors})
    unigram = None
    if model.unigram is not None:
        unigram = {"offset": offset, "size": int(model.unigram.size)}
        chunks.append(np.ascontiguousarray(model.unigram, dtype="<f8").tobytes())
        offset += model.unigram.size
    header = {
        "version": CKPT_VERSION,
        "vocab": {"n_labels": model.cfg.vocab_size, "sos": model.vocab.sos, "eos": model.vocab.eos, "blank_ctc": 0},
        "model_config": model.cfg.to_dict(),
        "groups": groups,
        "unigram": unigram,
        "metadata": model.meta,
    }
    hb = _canonical(header).encode("utf-8")
    body = _PRE.pack(CKPT_MAGIC, CKPT_VERSION, len(hb)) + hb + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def checkpoint_hash(model: Model) -> str:
    return hashlib.sha256(serialize_model(model)).hexdigest()[:16]


def checkpoint_save(model: Model, path) -> str:
    data = serialize_model(model)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()[:16]


def deserialize_model(raw: bytes) -> Model:
    if len(raw) < _PRE.size + 32:
        raise CheckpointCorruptError("file too short")
    magic, version, hlen = _PRE.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointCorruptError(f"bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {CKPT_VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointCorruptError("checksum mismatch (truncated or modified file)")
    try:
        header = json.loads(body[_PRE.size:_PRE.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f"unreadable header: {e}") from None
    payload = np.frombuffer(body, dtype="<f8", offset=_PRE.size + hlen).astype(np.float64)
    cfg = ModelConfig.from_dict(header["model_config"])
    if header["vocab"]["n_labels"] != cfg.vocab_size:
        raise CheckpointShapeError("vocabulary size disagrees with model config")
    expected = init_model(cfg, 0)
    groups = {}
    for gd in header["groups"]:
        tensors = {}
        for td in gd["tensors"]:
            n = int(np.prod(td["shape"])) if td["shape"] else 1
            if td["offset"] + n > payload.size:
                raise CheckpointCorruptError(f"tensor {gd['name']}/{td['name']} runs past the payload")
            tensors[td["name"]] = payload[td["offset"]:td["offset"] + n].reshape(td["shape"]).copy()
        groups[gd["name"]] = ParamGroup(gd["name"], tensors, gd["frozen"])
    for name, g in groups.items():
        ref = expected.groups.get(name.split("/")[0] + "/0" if "/" in name else name)
        if ref is None:
            raise CheckpointShapeError(f"unexpected group {name}")
        if set(ref.tensors) != set(g.tensors):
            raise CheckpointShapeError(f"group {name}: tensor names {sorted(g.tensors)} != {sorted(ref.tensors)}")
        for k, v in g.tensors.items():
            if v.shape != ref.tensors[k].shape:
                raise CheckpointShapeError(f"{name}/{k}: shape {v.shape} != {ref.tensors[k].shape}")
    missing = [k for k in ("encoder", "decoder", "han", "frame_att/0", "ctc/0") if k not in groups]
    n = sum(1 for k in groups if k.startswith("frame_att/"))
    missing += [f"{b}/{i}" for i in range(n) for b in ("frame_att", "ctc") if f"{b}/{i}" not in groups]
    if missing:
        raise CheckpointShapeError(f"missing group(s) {sorted(set(missing))}")
    unigram = None
    if header.get("unigram"):
        u = header["unigram"]
        unigram = payload[u["offset"]:u["offset"] + u["size"]].copy()
        if unigram.size != cfg.vocab_size + 2:
            raise CheckpointShapeError("unigram size disagrees with vocabulary")
    return Model(cfg, groups, unigram, header.get("metadata", {}))


def checkpoint_load(path) -> Model:
    return deserialize_model(Path(path).read_bytes())
