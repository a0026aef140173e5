"""Command-line harness: one subcommand per pipeline stage, plus ``run`` for the whole recipe.

Layout under ``--out``::

    corpus/             feature matrices + manifest.json            (gen-data)
    stage1.ckpt, .json  single-stream model + stamp                 (train-stage1)
    ufe/                encoded features + manifest.json            (extract-ufe)
    stage2.ckpt, .json  multi-stream model + stamp                  (train-stage2)
    decode/             n-best JSONL per condition x mode           (decode)
    score/              CSV + JSON summary per n-best file          (score)
    report.json/.csv    modes x conditions table, svg/ heatmaps     (report)

Every stage checks the hashes its inputs were stamped with and refuses to run on stale or
foreign artifacts. Every written file carries the config hash and the seed.

Exit codes: 0 success, 1 usage or configuration error, 2 missing or inconsistent data,
3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .datagen import DataFormatError, gen_corpus, load_corpus, save_corpus
from .experiments import (
    ConfigError,
    ExperimentConfig,
    Prepared,
    decode_many,
    fraction_sweep,
    trend_is_monotone_or_flat,
)
from .metrics import edit_distance_align, improved_fraction, score_rows, summary, write_score_csv
from .numcore import NumericError
from .pipeline import (
    CheckpointError,
    UpstreamMismatch,
    checkpoint_load,
    checkpoint_save,
    extract_ufe,
    load_ufe,
    train_stage1,
    train_stage2,
)

log = logging.getLogger("memarray")


class MissingArtifact(UpstreamMismatch):
    pass


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True)


class Run:
    """Resolved configuration, seed and output directory shared by all subcommands."""

    def __init__(self, cfg: ExperimentConfig, out, jobs: int = 1):
        self.cfg = cfg
        self.out = Path(out)
        self.jobs = jobs
        self.hashes = cfg.stage_digests()
        self.stamp = {"config_hash": cfg.digest(), "seed": cfg.seed}

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def stamped(self, stage: str, **kw) -> dict:
        return {**self.stamp, "stage": stage, "stage_hash": self.hashes[stage], **kw}

    def write_json(self, rel, obj) -> Path:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(_dump(obj))
        return p

    def require(self, rel: str, stage: str, producer: str) -> dict:
        """Load the stamp of an upstream artifact and check it was built from the current config and seed."""
        p = self.path(rel)
        if not p.exists():
            raise MissingArtifact(f"{p} not found; run `memarray {producer}` first")
        try:
            stamp = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{p}: unreadable ({e})") from None
        want = self.hashes[stage]
        if stamp.get("stage_hash") != want:
            raise UpstreamMismatch(f"{p} was built with {stage} hash {stamp.get('stage_hash')}, the current "
                                   f"config and seed expect {want}; re-run `memarray {producer}`")
        return stamp

    def check_file(self, rel: str, expected: str, producer: str) -> None:
        p = self.path(rel)
        if not p.exists():
            raise MissingArtifact(f"{p} not found; run `memarray {producer}` first")
        got = file_digest(p)
        if got != expected:
            raise UpstreamMismatch(f"{p} hashes to {got} but its consumer expects {expected}; "
                                   f"re-run `memarray {producer}`")


def streams_needed(cfg: ExperimentConfig) -> List[str]:
    return sorted({s for c in cfg.conditions for s in c.streams})


# ---------------------------------------------------------------- stages

def cmd_gen_data(run: Run) -> None:
    splits = gen_corpus(run.cfg.corpus, run.cfg.seed)
    save_corpus(splits, run.path("corpus"), extra=run.stamped("corpus"))
    log.info("wrote corpus: %s", {k: len(v) for k, v in splits.items()})


def cmd_train_stage1(run: Run) -> None:
    run.require("corpus/manifest.json", "corpus", "gen-data")
    splits = load_corpus(run.path("corpus"), ["train", "dev"])
    res = train_stage1(splits["train"], splits["dev"], run.cfg.stage1_streams, run.cfg.model,
                       run.cfg.stage1_config())
    res.model.meta.update(run.stamp)
    h = checkpoint_save(res.model, run.path("stage1.ckpt"))
    run.write_json("stage1.json", run.stamped("stage1", checkpoint=h, corpus=file_digest(run.path("corpus/manifest.json")),
                                              best_epoch=res.best_epoch, history=res.history))


def cmd_extract_ufe(run: Run) -> None:
    s1 = run.require("stage1.json", "stage1", "train-stage1")
    run.check_file("stage1.ckpt", s1["checkpoint"], "train-stage1")
    run.check_file("corpus/manifest.json", s1["corpus"], "gen-data")
    model = checkpoint_load(run.path("stage1.ckpt"))
    splits = load_corpus(run.path("corpus"))
    extract_ufe(model, splits, run.path("ufe"), s1["checkpoint"], extra=run.stamped("ufe"))


def _ufe(run: Run, split: str):
    s1 = run.require("stage1.json", "stage1", "train-stage1")
    run.require("ufe/manifest.json", "ufe", "extract-ufe")
    return load_ufe(run.path("ufe"), split, expect_checkpoint=s1["checkpoint"])


def cmd_train_stage2(run: Run) -> None:
    s1 = run.require("stage1.json", "stage1", "train-stage1")
    run.check_file("stage1.ckpt", s1["checkpoint"], "train-stage1")
    train, dev = _ufe(run, "train"), _ufe(run, "dev")
    res = train_stage2(train, dev, run.cfg.train_streams, checkpoint_load(run.path("stage1.ckpt")),
                       run.cfg.stage2_config())
    res.model.meta.update(run.stamp)
    h = checkpoint_save(res.model, run.path("stage2.ckpt"))
    run.write_json("stage2.json", run.stamped("stage2", checkpoint=h, stage1=s1["checkpoint"],
                                              ufe=file_digest(run.path("ufe/manifest.json")),
                                              best_epoch=res.best_epoch, history=res.history))


def _entry_json(e, full: bool) -> dict:
    d = {"transcript": list(e.transcript), "joint": e.joint, "att": e.att, "ctc": e.ctc,
         "ctc_streams": list(e.ctc_streams), "finished": e.finished}
    if full:
        d["beta_trace"] = np.asarray(e.beta_trace).tolist()
        d["frame_trace"] = [np.asarray(f).tolist() for f in e.frame_trace]
    return d


def _write_nbest(run: Run, rel: str, items, hyps, condition: str, mode: str, streams: Sequence[str]) -> None:
    lines = []
    for it, nb in zip(items, hyps):
        lines.append(json.dumps({**run.stamp, "utt_id": it.utt_id, "ref": it.transcript, "condition": condition,
                                 "mode": mode, "streams": list(streams),
                                 "nbest": [_entry_json(e, i == 0) for i, e in enumerate(nb)]}, sort_keys=True))
    p = run.path("decode", rel)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text("\n".join(lines) + "\n")


def cmd_decode(run: Run) -> None:
    s1 = run.require("stage1.json", "stage1", "train-stage1")
    s2 = run.require("stage2.json", "stage2", "train-stage2")
    run.check_file("stage1.ckpt", s1["checkpoint"], "train-stage1")
    run.check_file("stage2.ckpt", s2["checkpoint"], "train-stage2")
    run.check_file("ufe/manifest.json", s2["ufe"], "extract-ufe")
    items = _ufe(run, "test")
    stage1, stage2 = checkpoint_load(run.path("stage1.ckpt")), checkpoint_load(run.path("stage2.ckpt"))
    grid = run.cfg.decode
    files = {}
    for s in streams_needed(run.cfg):
        hyps = decode_many(stage1, [it.select([s]) for it in items], grid.config("equal", 1), grid.nbest, run.jobs)
        rel = f"single.{s}.jsonl"
        _write_nbest(run, rel, items, hyps, f"single:{s}", "single", [s])
        files[rel] = {"condition": f"single:{s}", "mode": "single", "streams": [s]}
    for c in run.cfg.conditions:
        for mode in c.modes:
            hyps = decode_many(stage2, [it.select(c.streams) for it in items], grid.config(mode, len(c.streams)),
                               grid.nbest, run.jobs)
            rel = f"{c.name}.{mode}.jsonl"
            _write_nbest(run, rel, items, hyps, c.name, mode, c.streams)
            files[rel] = {"condition": c.name, "mode": mode, "streams": list(c.streams)}
    for rel in files:
        files[rel]["digest"] = file_digest(run.path("decode", rel))
    run.write_json("decode/manifest.json", run.stamped("decode", stage1=s1["checkpoint"], stage2=s2["checkpoint"],
                                                       files=files))


def read_nbest(path) -> List[dict]:
    try:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: malformed n-best line ({e})") from None


def cmd_score(run: Run) -> None:
    dm = run.require("decode/manifest.json", "decode", "decode")
    rates: Dict[str, List[float]] = {}
    decoded = {}
    for rel, info in sorted(dm["files"].items()):
        run.check_file(f"decode/{rel}", info["digest"], "decode")
        recs = read_nbest(run.path("decode", rel))
        refs = {r["utt_id"]: r["ref"] for r in recs}
        hyps = {r["utt_id"]: r["nbest"][0]["transcript"] for r in recs}
        decoded[rel] = (info, refs, hyps)
        rates[rel] = [edit_distance_align(refs[u], hyps[u]).rate for u in sorted(refs)]
    files = {}
    run.path("score").mkdir(parents=True, exist_ok=True)
    for rel, (info, refs, hyps) in sorted(decoded.items()):
        stem = rel[: -len(".jsonl")]
        rows = score_rows(refs, hyps)
        write_score_csv(run.path("score", f"{stem}.csv"), rows, run.stamp)
        summ = {**run.stamp, **summary(rows), "condition": info["condition"], "mode": info["mode"],
                "streams": info["streams"], "nbest": f"decode/{rel}", "scores": f"score/{stem}.csv"}
        summ["ter_percent"] = 100.0 * summ["ter"]
        if info["mode"] != "single":
            singles = [rates[f"single.{s}.jsonl"] for s in info["streams"]]
            best = [min(v) for v in zip(*singles)]
            summ["improved_fraction"] = improved_fraction(rates[rel], best)
        run.write_json(f"score/{stem}.json", summ)
        files[stem] = file_digest(run.path("score", f"{stem}.json"))
    run.write_json("score/manifest.json", run.stamped("decode", decode=file_digest(run.path("decode/manifest.json")),
                                                      files=files))


def cmd_report(run: Run, svg_utts: int = 1) -> dict:
    sm = run.require("score/manifest.json", "decode", "score")
    run.check_file("decode/manifest.json", sm["decode"], "decode")
    summaries = {}
    for stem, digest in sm["files"].items():
        run.check_file(f"score/{stem}.json", digest, "score")
        summaries[stem] = json.loads(run.path("score", f"{stem}.json").read_text())
    table = {}
    for c in run.cfg.conditions:
        table[c.name] = {}
        for mode in c.modes:
            s = summaries[f"{c.name}.{mode}"]
            table[c.name][mode] = {k: s[k] for k in ("ter_percent", "S", "D", "I", "ref_len", "n_utts",
                                                      "improved_fraction", "nbest", "scores")}
    single = {s["streams"][0]: s["ter_percent"] for s in summaries.values() if s["mode"] == "single"}
    modes = [m for m in ("equal", "adaptive", "fixed") if any(m in c.modes for c in run.cfg.conditions)]
    svgs = []
    for c in run.cfg.conditions:
        mode = "adaptive" if "adaptive" in c.modes else c.modes[0]
        recs = read_nbest(run.path("decode", f"{c.name}.{mode}.jsonl"))
        for r in recs[:svg_utts]:
            best = r["nbest"][0]
            svgs += emit_attention_svg(best["beta_trace"], best["frame_trace"], run.path("svg"),
                                       f"{c.name}.{mode}.{r['utt_id']}", c.streams, run.stamp)
    report = {**run.stamp, "conditions": [c.name for c in run.cfg.conditions], "modes": modes,
              "table": table, "stage1_single_stream_ter": single,
              "svg": [str(p.relative_to(run.out)) for p in svgs]}
    run.write_json("report.json", report)
    with open(run.path("report.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "metric"] + report["conditions"] + ["config_hash", "seed"])
        for metric in ("ter_percent", "improved_fraction"):
            for mode in modes:
                w.writerow([mode, metric] + [table[c][mode][metric] if mode in table[c] else ""
                                             for c in report["conditions"]] + [run.stamp["config_hash"],
                                                                               run.stamp["seed"]])
    print(format_table(report))
    return report


def format_table(report: dict) -> str:
    conds = report["conditions"]
    lines = ["TER % (improved fraction)", "mode".ljust(10) + "".join(c.rjust(20) for c in conds)]
    for mode in report["modes"]:
        cells = []
        for c in conds:
            e = report["table"][c].get(mode)
            cells.append("-" if e is None else f"{e['ter_percent']:.2f} ({e['improved_fraction']:.2f})")
        lines.append(mode.ljust(10) + "".join(x.rjust(20) for x in cells))
    return "\n".join(lines)


def cmd_run(run: Run, svg_utts: int = 1) -> dict:
    for step in (cmd_gen_data, cmd_train_stage1, cmd_extract_ufe, cmd_train_stage2, cmd_decode, cmd_score):
        log.info("== %s", step.__name__[4:].replace("_", "-"))
        step(run)
    return cmd_report(run, svg_utts)


def cmd_sweep(run: Run, fractions: Sequence[float]) -> dict:
    """Stage-2 data-fraction sweep on top of the trained Stage-1 model; trends are logged, not asserted."""
    s1 = run.require("stage1.json", "stage1", "train-stage1")
    run.check_file("stage1.ckpt", s1["checkpoint"], "train-stage1")
    stage1 = checkpoint_load(run.path("stage1.ckpt"))
    ufe = {k: _ufe(run, k) for k in ("train", "dev", "test")}
    res = fraction_sweep(Prepared(run.cfg, {}, stage1, ufe), tuple(fractions), jobs=run.jobs)
    trends = {}
    for c in run.cfg.conditions:
        vals = [res[f][c.name] for f in sorted(res)]
        trends[c.name] = trend_is_monotone_or_flat(vals)
        if not trends[c.name]:
            log.warning("condition %s: TER is not monotone-or-flat in the data fraction: %s", c.name, vals)
    out = {**run.stamp, "stage1": s1["checkpoint"], "ter_percent": {str(f): v for f, v in res.items()},
           "monotone_or_flat": trends}
    run.write_json("sweep.json", out)
    return out


# ---------------------------------------------------------------- SVG heatmaps

def gray(v: float) -> str:
    """Linear grayscale ramp: 0 -> white (#ffffff), 1 -> black (#000000); values are clipped to [0, 1]."""
    g = int(round(255 * (1.0 - min(max(float(v), 0.0), 1.0))))
    return f"#{g:02x}{g:02x}{g:02x}"


def heatmap_svg(m, title: str, row_labels: Sequence[str], stamp: dict, cell: int = 12) -> str:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    rows, cols = m.shape
    left, top = 70, 24
    w, h = left + cols * cell + 4, top + rows * cell + 4
    out = ['<?xml version="1.0" encoding="UTF-8"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
           f"<title>{escape(title)}</title>",
           f"<desc>config_hash={escape(str(stamp.get('config_hash')))} seed={escape(str(stamp.get('seed')))} "
           "ramp=linear gray, 0 white, 1 black</desc>",
           f'<text x="2" y="14" font-size="11" font-family="monospace">{escape(title)}</text>']
    for i in range(rows):
        label = row_labels[i] if i < len(row_labels) else str(i)
        out.append(f'<text x="2" y="{top + i * cell + cell - 2}" font-size="9" font-family="monospace">'
                   f"{escape(label)}</text>")
        for j in range(cols):
            out.append(f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                       f'fill="{gray(m[i, j])}"><title>{m[i, j]:.4f}</title></rect>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_attention_svg(beta_trace, frame_weights, out_dir, stem: str, stream_names: Sequence[str],
                       stamp: Optional[dict] = None) -> List[Path]:
    """Write one frame-alignment heatmap per stream (rows: output steps, columns: UFE frames) and one
    stream-weight heatmap (rows: streams, columns: output steps)."""
    beta = np.atleast_2d(np.asarray(beta_trace, dtype=np.float64))
    if beta.size == 0:
        raise ValueError("empty beta trace")
    stamp = stamp or {}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, fw in enumerate(frame_weights):
        fw = np.atleast_2d(np.asarray(fw, dtype=np.float64))
        name = stream_names[i] if i < len(stream_names) else str(i)
        p = out_dir / f"{stem}.frames.{name}.svg"
        p.write_text(heatmap_svg(fw, f"{stem} frame attention, stream {name}",
                                 [f"step {k + 1}" for k in range(fw.shape[0])], stamp))
        paths.append(p)
    p = out_dir / f"{stem}.beta.svg"
    p.write_text(heatmap_svg(beta.T, f"{stem} stream attention", list(stream_names), stamp))
    paths.append(p)
    return paths


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


COMMANDS = ["gen-data", "train-stage1", "extract-ufe", "train-stage2", "decode", "score", "report", "run", "sweep"]


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON); defaults to the desk recipe")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="artifact directory")
    common.add_argument("--jobs", type=int, default=1, help="decoding worker processes")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="memarray", description="Multi-stream joint CTC/attention recognition on synthetic data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("report", "run"):
            sp.add_argument("--svg-utts", type=int, default=1, help="utterances per condition to draw")
        if name == "sweep":
            sp.add_argument("--fractions", type=float, nargs="+", default=[0.01, 0.1, 0.5, 1.0])
    sub.add_parser("dump-config", parents=[common], help="print the resolved config as JSON")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.command == "dump-config":
            print(_dump(cfg.to_dict()))
            return 0
        run = Run(cfg, args.out, args.jobs)
        if args.command == "run":
            cmd_run(run, args.svg_utts)
        elif args.command == "report":
            cmd_report(run, args.svg_utts)
        elif args.command == "sweep":
            cmd_sweep(run, args.fractions)
        else:
            {"gen-data": cmd_gen_data, "train-stage1": cmd_train_stage1, "extract-ufe": cmd_extract_ufe,
             "train-stage2": cmd_train_stage2, "decode": cmd_decode, "score": cmd_score}[args.command](run)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (UpstreamMismatch, DataFormatError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
