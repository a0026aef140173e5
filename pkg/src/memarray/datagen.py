"""Synthetic multi-stream corpus, per-utterance normalization, dead channels and augmentation."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .numcore import derive_rng


class CorpusConfigError(ValueError):
    pass


class DataFormatError(ValueError):
    pass


@dataclass
class FeatureSequence:
    frames: np.ndarray  # T x D
    stream_id: str
    utt_id: str

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"{self.utt_id}/{self.stream_id}: need a T x D matrix with T >= 1")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def D(self) -> int:
        return self.frames.shape[1]

    def with_frames(self, frames) -> "FeatureSequence":
        return FeatureSequence(frames, self.stream_id, self.utt_id)


@dataclass
class StreamBundle:
    utt_id: str
    streams: List[FeatureSequence]
    transcript: List[int]
    meta: Dict = field(default_factory=dict)

    def stream(self, name: str) -> FeatureSequence:
        for s in self.streams:
            if s.stream_id == name:
                return s
        raise KeyError(f"{self.utt_id}: no stream {name!r}")

    def select(self, names: Sequence[str]) -> "StreamBundle":
        return StreamBundle(self.utt_id, [self.stream(n) for n in names], list(self.transcript), self.meta)


@dataclass
class StreamSpec:
    """Corruption recipe for one synthetic stream."""

    name: str
    snr_db: Optional[float] = None  # additive white noise relative to clean signal power
    smear: int = 1  # length of the causal exponential smearing filter (1 = off)
    smear_decay: float = 0.6
    gain: float = 1.0
    offset: float = 0.0
    nomic: bool = False


@dataclass
class CorpusConfig:
    vocab_size: int = 12
    feat_dim: int = 20
    min_len: int = 3
    max_len: int = 10
    frames_per_label: int = 8
    frame_jitter: int = 2
    frame_noise: float = 0.3
    subsample: int = 4
    streams: List[StreamSpec] = field(default_factory=lambda: [
        StreamSpec("A", snr_db=20.0),
        StreamSpec("B", snr_db=5.0, smear=3),
        StreamSpec("nomic", nomic=True),
    ])
    n_train: int = 240
    n_dev: int = 30
    n_test: int = 40

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise CorpusConfigError("vocab_size must be >= 2")
        if self.feat_dim < 1:
            raise CorpusConfigError("feat_dim must be >= 1")
        if not (1 <= self.min_len <= self.max_len):
            raise CorpusConfigError("need 1 <= min_len <= max_len")
        if self.frames_per_label - self.frame_jitter < 1:
            raise CorpusConfigError("frames_per_label - frame_jitter must be >= 1")
        if not self.streams:
            raise CorpusConfigError("at least one stream is required")
        names = [s.name for s in self.streams]
        if len(set(names)) != len(names):
            raise CorpusConfigError(f"duplicate stream names {names}")
        for s in self.streams:
            if s.smear < 1:
                raise CorpusConfigError(f"stream {s.name}: smear must be >= 1")
        if min(self.n_train, self.n_dev, self.n_test) < 0 or self.n_train + self.n_dev + self.n_test == 0:
            raise CorpusConfigError("split sizes must be non-negative and not all zero")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        streams = d.pop("streams", None)
        _reject_unknown(cls, d, "corpus")
        cfg = cls(**d)
        if streams is not None:
            parsed = []
            for s in streams:
                _reject_unknown(StreamSpec, s, "corpus.streams[]")
                parsed.append(StreamSpec(**s))
            cfg.streams = parsed
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


def _reject_unknown(cls, d: dict, where: str) -> None:
    known = set(cls.__dataclass_fields__)
    extra = sorted(set(d) - known)
    if extra:
        raise CorpusConfigError(f"unknown key(s) in {where}: {extra}")


# ---------------------------------------------------------------- generation

def label_templates(cfg: CorpusConfig, seed: int) -> np.ndarray:
    return derive_rng(seed, "templates").standard_normal((cfg.vocab_size, cfg.feat_dim))


def _min_ctc_frames(labels: Sequence[int]) -> int:
    return len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def render_clean(labels: Sequence[int], templates: np.ndarray, cfg: CorpusConfig, rng: np.random.Generator) -> np.ndarray:
    """Each label emits its template for a jittered number of frames, plus per-frame noise.

    Durations are redrawn until the subsampled length leaves room for a CTC alignment.
    """
    need = _min_ctc_frames(labels)
    while True:
        durs = rng.integers(cfg.frames_per_label - cfg.frame_jitter, cfg.frames_per_label + cfg.frame_jitter + 1,
                            size=len(labels))
        if int(durs.sum()) // cfg.subsample >= need:
            break
    rows = np.repeat(np.asarray(labels), durs)
    return templates[rows] + cfg.frame_noise * rng.standard_normal((rows.size, templates.shape[1]))


def corrupt(clean: np.ndarray, spec: StreamSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.nomic:
        return np.zeros_like(clean)
    x = clean
    if spec.smear > 1:
        taps = spec.smear_decay ** np.arange(spec.smear)
        taps /= taps.sum()
        y = np.zeros_like(x)
        for k, c in enumerate(taps):
            y[k:] += c * x[: x.shape[0] - k]
            y[:k] += c * x[:1]
        x = y
    if spec.snr_db is not None:
        power = float(np.mean(x * x))
        sigma = np.sqrt(power / (10.0 ** (spec.snr_db / 10.0)))
        x = x + sigma * rng.standard_normal(x.shape)
    return spec.gain * x + spec.offset


def normalize_mv(f: FeatureSequence) -> FeatureSequence:
    """Per-dimension mean/variance normalization over the utterance; flat dimensions become 0."""
    x = f.frames
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    flat = sd < 1e-8
    out = (x - mu) / np.where(flat, 1.0, sd)
    out[:, flat] = 0.0
    return f.with_frames(out)


def make_nomic(template: FeatureSequence) -> FeatureSequence:
    return template.with_frames(np.zeros_like(template.frames))


def gen_utterance(cfg: CorpusConfig, seed: int, utt_id: str, templates: np.ndarray) -> StreamBundle:
    rng = derive_rng(seed, "utt", utt_id)
    L = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    labels = [int(v) for v in rng.integers(0, cfg.vocab_size, size=L)]
    clean = render_clean(labels, templates, cfg, rng)
    streams = []
    for spec in cfg.streams:
        srng = derive_rng(seed, "utt", utt_id, "stream", spec.name)
        fs = FeatureSequence(corrupt(clean, spec, srng), spec.name, utt_id)
        streams.append(make_nomic(fs) if spec.nomic else normalize_mv(fs))
    return StreamBundle(utt_id, streams, labels, {"T": int(clean.shape[0])})


def gen_corpus(cfg: CorpusConfig, seed: int) -> Dict[str, List[StreamBundle]]:
    """Deterministic train/dev/test splits of synthetic multi-stream utterances."""
    cfg.validate()
    templates = label_templates(cfg, seed)
    splits = {}
    for split, n in (("train", cfg.n_train), ("dev", cfg.n_dev), ("test", cfg.n_test)):
        splits[split] = [gen_utterance(cfg, seed, f"{split}{i:05d}", templates) for i in range(n)]
    return splits


# ---------------------------------------------------------------- augmentation

@dataclass
class MaskPolicy:
    num_time_masks: int = 2
    max_time: int = 40
    num_freq_masks: int = 2
    max_freq: int = 30
    fill: str = "zero"  # or "mean"

    def validate(self, D: Optional[int] = None) -> None:
        if min(self.num_time_masks, self.max_time, self.num_freq_masks, self.max_freq) < 0:
            raise ValueError("mask counts and sizes must be >= 0")
        if self.fill not in ("zero", "mean"):
            raise ValueError(f"unknown fill {self.fill!r}")


def _draw_span(rng: np.random.Generator, n: int, max_len: int):
    length = min(int(rng.integers(0, max_len + 1)), n)
    start = int(rng.integers(0, n - length + 1))
    return start, length


def spec_augment(f: FeatureSequence, policy: MaskPolicy, rng: np.random.Generator, return_mask: bool = False):
    """Time and frequency masking (no time warping). Mask lengths ~ U{0..max}, clipped to the input."""
    policy.validate()
    x = f.frames.copy()
    T, D = x.shape
    mask = np.zeros((T, D), dtype=bool)
    for _ in range(policy.num_time_masks):
        s, n = _draw_span(rng, T, policy.max_time)
        mask[s:s + n, :] = True
    for _ in range(policy.num_freq_masks):
        s, n = _draw_span(rng, D, min(policy.max_freq, D))
        mask[:, s:s + n] = True
    if policy.fill == "zero":
        x[mask] = 0.0
    else:
        x[mask] = np.broadcast_to(f.frames.mean(axis=0), (T, D))[mask]
    out = f.with_frames(x)
    return (out, mask) if return_mask else out


def stage2_time_mask(h: np.ndarray, num_masks: int, max_len: int, rng: np.random.Generator,
                     return_mask: bool = False):
    """Replace random time spans of UFE features with the per-dimension utterance mean."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[0] < 1:
        raise ValueError("empty UFE sequence")
    T = h.shape[0]
    rows = np.zeros(T, dtype=bool)
    for _ in range(num_masks):
        s, n = _draw_span(rng, T, max_len)
        rows[s:s + n] = True
    out = h.copy()
    if rows.any():
        out[rows] = h.mean(axis=0)
    return (out, rows) if return_mask else out


def input_dropout(h: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted dropout on every scalar of the UFE features."""
    if not (0.0 <= p < 1.0):
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    h = np.asarray(h, dtype=np.float64)
    if p == 0.0:
        return h.copy()
    keep = rng.random(h.shape) >= p
    return np.where(keep, h / (1.0 - p), 0.0)


# ---------------------------------------------------------------- on-disk format
#
# Matrix file (little-endian): magic b"MEMX", u32 version, u64 rows, u64 cols, rows*cols f64 row-major.

MATRIX_MAGIC = b"MEMX"
MATRIX_VERSION = 1
_HDR = struct.Struct("<4sIQQ")


def write_matrix(path, m: np.ndarray) -> None:
    m = np.ascontiguousarray(m, dtype="<f8")
    if m.ndim != 2:
        raise ValueError("matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(_HDR.pack(MATRIX_MAGIC, MATRIX_VERSION, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HDR.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, rows, cols = _HDR.unpack_from(raw)
    if magic != MATRIX_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != MATRIX_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if len(raw) != _HDR.size + 8 * rows * cols:
        raise DataFormatError(f"{path}: payload size mismatch")
    return np.frombuffer(raw, dtype="<f8", offset=_HDR.size).reshape(rows, cols).astype(np.float64)


def save_corpus(splits: Dict[str, List[StreamBundle]], root, extra: Optional[dict] = None) -> dict:
    """One directory per split with ``<utt>.<stream>.mat`` files and a ``manifest.json``."""
    root = Path(root)
    manifest = {"splits": {}, **(extra or {})}
    for split, bundles in splits.items():
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        entries = {}
        for b in bundles:
            files = {}
            for s in b.streams:
                fname = f"{b.utt_id}.{s.stream_id}.mat"
                write_matrix(d / fname, s.frames)
                files[s.stream_id] = fname
            entries[b.utt_id] = {"streams": files, "transcript": list(b.transcript), "meta": b.meta}
        manifest["splits"][split] = entries
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_corpus(root, splits: Optional[Sequence[str]] = None) -> Dict[str, List[StreamBundle]]:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    out = {}
    for split, entries in manifest["splits"].items():
        if splits is not None and split not in splits:
            continue
        bundles = []
        for utt in sorted(entries):
            e = entries[utt]
            streams = [FeatureSequence(read_matrix(root / split / fn), sid, utt) for sid, fn in e["streams"].items()]
            bundles.append(StreamBundle(utt, streams, list(e["transcript"]), e.get("meta", {})))
        out[split] = bundles
    return out
