"""Experiment configuration, batch decoding and scoring, and the desk-scale studies.

The studies mirror the paper's experimental contrasts on the synthetic corpus: the dead-channel
comparison of fusion modes, Stage-2 time masking against input dropout, the Stage-2 data-fraction
sweep and an SNR sweep of the Stage-1 model.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .datagen import CorpusConfig, CorpusConfigError, MaskPolicy, StreamSpec, gen_corpus
from .metrics import ErrorBreakdown, aggregate, edit_distance_align, improved_fraction
from .model import Model, ModelConfig
from .pipeline import TrainConfig, UfeItem, config_digest, encode_corpus, train_stage1, train_stage2
from .search import MODES, DecodeConfig, NBestEntry, beam_search

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


# ---------------------------------------------------------------- configuration

@dataclass
class Condition:
    """A test stream combination, decoded under each listed fusion mode."""

    name: str
    streams: List[str]
    modes: List[str] = field(default_factory=lambda: list(MODES))


@dataclass
class DecodeGrid:
    beam: int = 5
    lam: float = 0.3
    fixed_weights: Optional[List[float]] = None  # None: all weight on the first stream
    max_output_len: Optional[int] = None
    nbest: int = 5

    def config(self, mode: str, n_streams: int) -> DecodeConfig:
        fixed = None
        if mode == "fixed":
            fixed = tuple(self.fixed_weights) if self.fixed_weights is not None else (1.0,) + (0.0,) * (n_streams - 1)
        return DecodeConfig(beam=self.beam, lam=self.lam, fusion_mode=mode, fixed_weights=fixed,
                            max_output_len=self.max_output_len)


def desk_stage1() -> TrainConfig:
    return TrainConfig(lam=0.2, epochs=30, patience=3, batch_size=8, eps=1e-6,
                       spec_augment=MaskPolicy(2, 8, 2, 4))


def desk_stage2() -> TrainConfig:
    return TrainConfig(lam=0.2, epochs=30, patience=3, batch_size=4, eps=1e-6, time_masks=3, time_mask_len=10)


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: TrainConfig = field(default_factory=desk_stage1)
    stage2: TrainConfig = field(default_factory=desk_stage2)
    stage1_streams: List[str] = field(default_factory=lambda: ["A", "B"])
    train_streams: List[str] = field(default_factory=lambda: ["A", "B"])
    conditions: List[Condition] = field(default_factory=lambda: [
        Condition("matched", ["A", "B"]), Condition("mismatched", ["A", "nomic"])])
    decode: DecodeGrid = field(default_factory=DecodeGrid)
    seed: int = 0

    def validate(self) -> None:
        try:
            self.corpus.validate()
            self.model.validate()
            self.stage1.validate()
            self.stage2.validate()
        except (ValueError, CorpusConfigError) as e:
            raise ConfigError(str(e)) from None
        c, m = self.corpus, self.model
        if (c.vocab_size, c.feat_dim, c.subsample) != (m.vocab_size, m.feat_dim, m.subsample):
            raise ConfigError("corpus and model disagree on vocab_size / feat_dim / subsample")
        known = {s.name for s in c.streams}
        for where, names in (("stage1_streams", self.stage1_streams), ("train_streams", self.train_streams)):
            if not names:
                raise ConfigError(f"{where} is empty")
            missing = sorted(set(names) - known)
            if missing:
                raise ConfigError(f"{where} names unknown stream(s) {missing}; corpus has {sorted(known)}")
        if len(self.train_streams) < 2:
            raise ConfigError("train_streams needs at least two streams")
        if not self.conditions:
            raise ConfigError("no test conditions")
        names = [cd.name for cd in self.conditions]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate condition names {names}")
        for cd in self.conditions:
            missing = sorted(set(cd.streams) - known)
            if missing:
                raise ConfigError(f"condition {cd.name} names unknown stream(s) {missing}")
            if len(cd.streams) != len(self.train_streams):
                raise ConfigError(f"condition {cd.name} has {len(cd.streams)} streams, the Stage-2 model has "
                                  f"{len(self.train_streams)}")
            if not cd.modes:
                raise ConfigError(f"condition {cd.name} lists no fusion modes")
            for mode in cd.modes:
                try:
                    self.decode.config(mode, len(cd.streams)).validate(len(cd.streams))
                except ValueError as e:
                    raise ConfigError(f"condition {cd.name}: {e}") from None

    # serialization
    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus.to_dict(),
            "model": self.model.to_dict(),
            "stage1": self.stage1.to_dict(),
            "stage2": self.stage2.to_dict(),
            "stage1_streams": list(self.stage1_streams),
            "train_streams": list(self.train_streams),
            "conditions": [asdict(c) for c in self.conditions],
            "decode": asdict(self.decode),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        _strict(cls, d, "config")
        cfg = cls()
        try:
            if "corpus" in d:
                cfg.corpus = CorpusConfig.from_dict(d["corpus"])
            if "model" in d:
                cfg.model = ModelConfig.from_dict(d["model"])
            for stage in ("stage1", "stage2"):
                if stage in d:
                    base = getattr(cfg, stage).to_dict()
                    base.update(d[stage])
                    setattr(cfg, stage, TrainConfig.from_dict(base))
            for key in ("stage1_streams", "train_streams"):
                if key in d:
                    setattr(cfg, key, [str(s) for s in d[key]])
            if "conditions" in d:
                conds = []
                for c in d["conditions"]:
                    _strict(Condition, c, "conditions[]")
                    conds.append(Condition(**c))
                cfg.conditions = conds
            if "decode" in d:
                _strict(DecodeGrid, d["decode"], "decode")
                cfg.decode = DecodeGrid(**d["decode"])
            if "seed" in d:
                cfg.seed = int(d["seed"])
        except (TypeError, CorpusConfigError) as e:
            raise ConfigError(str(e)) from None
        except ValueError as e:
            raise ConfigError(str(e)) from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(d)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        cfg = ExperimentConfig.from_dict(self.to_dict())
        cfg.seed = seed
        return cfg

    def stage1_config(self) -> TrainConfig:
        return replace(self.stage1, seed=self.seed)

    def stage2_config(self, **overrides) -> TrainConfig:
        return replace(self.stage2, seed=self.seed, **overrides)

    def digest(self) -> str:
        """Hash of everything except the seed, which every artifact records separately."""
        d = self.to_dict()
        d.pop("seed")
        return config_digest(d)

    def stage_digests(self) -> Dict[str, str]:
        """Per-stage hashes: a stage's hash covers its own settings and everything upstream of it."""
        d = self.to_dict()
        out = {"corpus": config_digest({"corpus": d["corpus"], "seed": self.seed})}
        out["stage1"] = config_digest({"up": out["corpus"], "model": d["model"], "stage1": d["stage1"],
                                       "streams": d["stage1_streams"]})
        out["ufe"] = config_digest({"up": out["stage1"]})
        out["stage2"] = config_digest({"up": out["ufe"], "stage2": d["stage2"], "streams": d["train_streams"]})
        out["decode"] = config_digest({"up": out["stage2"], "conditions": d["conditions"], "decode": d["decode"]})
        return out


def _strict(cls, d: dict, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    extra = sorted(set(d) - set(cls.__dataclass_fields__))
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {extra}")


# ---------------------------------------------------------------- decoding and scoring

def _decode_chunk(args):
    model, chunk, cfg, nbest = args
    return [beam_search(model, hs, cfg, nbest) for hs in chunk]


def decode_many(model: Model, inputs: Sequence[List[np.ndarray]], cfg: DecodeConfig, nbest: int = 1,
                jobs: int = 1) -> List[List[NBestEntry]]:
    """Beam-search every input; with ``jobs > 1`` utterances are split across worker processes.

    Results come back in input order and do not depend on ``jobs``.
    """
    inputs = list(inputs)
    if jobs <= 1 or len(inputs) < 2:
        return [beam_search(model, hs, cfg, nbest) for hs in inputs]
    bounds = np.linspace(0, len(inputs), min(jobs, len(inputs)) + 1).astype(int)
    chunks = [(model, inputs[a:b], cfg, nbest) for a, b in zip(bounds[:-1], bounds[1:])]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_decode_chunk, chunks))
    return [r for part in parts for r in part]


def breakdowns(items: Sequence[UfeItem], hyps: Sequence[List[NBestEntry]]) -> List[ErrorBreakdown]:
    return [edit_distance_align(it.transcript, nb[0].transcript) for it, nb in zip(items, hyps)]


def ter(errs: Sequence[ErrorBreakdown]) -> float:
    """Pooled token error rate in percent."""
    return 100.0 * aggregate(errs)


def decode_condition(model: Model, items: Sequence[UfeItem], streams: Sequence[str], grid: DecodeGrid, mode: str,
                     jobs: int = 1, nbest: int = 1) -> List[List[NBestEntry]]:
    return decode_many(model, [it.select(streams) for it in items], grid.config(mode, len(streams)), nbest, jobs)


def single_stream_errors(stage1: Model, items: Sequence[UfeItem], streams: Sequence[str], grid: DecodeGrid,
                         jobs: int = 1) -> Dict[str, List[ErrorBreakdown]]:
    """Stage-1 decoding of each stream on its own."""
    return {s: breakdowns(items, decode_condition(stage1, items, [s], grid, "equal", jobs)) for s in streams}


def best_single_rates(single: Dict[str, List[ErrorBreakdown]], streams: Sequence[str]) -> List[float]:
    """Per-utterance minimum over the single-stream rates of ``streams``."""
    return [min(single[s][u].rate for s in streams) for u in range(len(single[streams[0]]))]


def improved(multi: Sequence[ErrorBreakdown], single: Dict[str, List[ErrorBreakdown]], streams: Sequence[str]) -> float:
    return improved_fraction([e.rate for e in multi], best_single_rates(single, streams))


# ---------------------------------------------------------------- studies

@dataclass
class Prepared:
    """A corpus, its Stage-1 model, and UFE features for every split."""

    cfg: ExperimentConfig
    splits: dict
    stage1: Model
    ufe: Dict[str, List[UfeItem]]


def prepare(cfg: ExperimentConfig, stage1: Optional[Model] = None) -> Prepared:
    cfg.validate()
    splits = gen_corpus(cfg.corpus, cfg.seed)
    if stage1 is None:
        stage1 = train_stage1(splits["train"], splits["dev"], cfg.stage1_streams, cfg.model,
                              cfg.stage1_config()).model
    ufe = {k: encode_corpus(stage1, v) for k, v in splits.items()}
    return Prepared(cfg, splits, stage1, ufe)


def dead_channel_study(p: Prepared, clean: str = "A", dead: str = "nomic", jobs: int = 1) -> dict:
    """Stage-2 trained and tested on (clean, dead): every fusion mode against Stage-1 on the clean stream.

    Stage-2 here trains without augmentation, so the model sees the dead stream as it is.
    """
    cfg, grid, test = p.cfg, p.cfg.decode, p.ufe["test"]
    streams = [clean, dead]
    model = train_stage2(p.ufe["train"], p.ufe["dev"], streams, p.stage1,
                         cfg.stage2_config(time_masks=0, dropout=0.0)).model
    out = {"seed": cfg.seed, "streams": streams}
    joints = {}
    for mode in MODES:
        hyps = decode_condition(model, test, streams, grid, mode, jobs)
        out[mode] = ter(breakdowns(test, hyps))
        joints[mode] = [nb[0].joint for nb in hyps]
        if mode == "adaptive":
            betas = np.concatenate([nb[0].beta_trace for nb in hyps])
            out["beta_clean_share"] = float(np.mean(betas[:, 0] > 0.5))
    out["single_clean"] = ter(breakdowns(test, decode_condition(p.stage1, test, [clean], grid, "equal", jobs)))
    out["adaptive_joint_ge_equal"] = float(np.mean(np.array(joints["adaptive"]) >= np.array(joints["equal"])))
    return out


STAGE2_VARIANTS = {
    "none": dict(time_masks=0, dropout=0.0),
    "mask": dict(time_masks=3, time_mask_len=10, dropout=0.0),
    "dropout_0.2": dict(time_masks=0, dropout=0.2),
    "dropout_0.5": dict(time_masks=0, dropout=0.5),
}


def augmentation_study(p: Prepared, train_streams=("A", "B"), matched=("A", "B"), mismatched=("A", "nomic"),
                       mode: str = "adaptive", variants=STAGE2_VARIANTS, jobs: int = 1) -> dict:
    """Stage-2 augmentation variants, each scored on a matched and a mismatched condition."""
    cfg, test = p.cfg, p.ufe["test"]
    out = {}
    for name, kw in variants.items():
        model = train_stage2(p.ufe["train"], p.ufe["dev"], list(train_streams), p.stage1,
                             cfg.stage2_config(**kw)).model
        out[name] = {
            "matched": ter(breakdowns(test, decode_condition(model, test, list(matched), cfg.decode, mode, jobs))),
            "mismatched": ter(breakdowns(test, decode_condition(model, test, list(mismatched), cfg.decode, mode,
                                                                jobs))),
        }
        log.info("seed %d stage-2 %s: %s", cfg.seed, name, out[name])
    return out


def fraction_sweep(p: Prepared, fractions=(0.01, 0.1, 0.5, 1.0), mode: str = "adaptive", jobs: int = 1) -> dict:
    """TER on every configured condition for Stage-2 models trained on a fraction of the data."""
    cfg, test = p.cfg, p.ufe["test"]
    out = {}
    for frac in fractions:
        model = train_stage2(p.ufe["train"], p.ufe["dev"], cfg.train_streams, p.stage1,
                             cfg.stage2_config(data_fraction=frac)).model
        out[frac] = {c.name: ter(breakdowns(test, decode_condition(model, test, c.streams, cfg.decode, mode, jobs)))
                     for c in cfg.conditions}
    return out


def trend_is_monotone_or_flat(values: Sequence[float], tol: float = 0.0) -> bool:
    """Non-increasing up to ``tol``."""
    return all(b <= a + tol for a, b in zip(values, values[1:]))


def snr_sweep(p: Prepared, snrs=(30.0, 20.0, 10.0, 0.0), jobs: int = 1) -> Dict[float, float]:
    """Stage-1 TER on test streams rendered at each SNR from the same utterances."""
    cfg = p.cfg
    specs = [StreamSpec(f"snr{i}", snr_db=s) for i, s in enumerate(snrs)]
    corpus = replace(cfg.corpus, streams=specs, n_train=0, n_dev=0)
    test = gen_corpus(corpus, cfg.seed)["test"]
    items = encode_corpus(p.stage1, test)
    single = single_stream_errors(p.stage1, items, [s.name for s in specs], cfg.decode, jobs)
    return {snr: ter(single[s.name]) for snr, s in zip(snrs, specs)}
