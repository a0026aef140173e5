"""Token error rate via Levenshtein alignment, pooled aggregation, and improved-utterance fraction."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class ErrorBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self) -> float:
        return self.errors / self.ref_len


def edit_distance_align(ref: Sequence, hyp: Sequence) -> ErrorBreakdown:
    """Minimum-cost alignment. Among equal-cost alignments the backtrace prefers
    substitution (or match), then deletion, then insertion."""
    n, m = len(ref), len(hyp)
    if n == 0:
        raise ValueError("empty reference")
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    S = D = I = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            D += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return ErrorBreakdown(int(S), D, I, n)


def aggregate(results: Iterable[ErrorBreakdown]) -> float:
    """Pooled rate: total errors over total reference length."""
    results = list(results)
    if not results:
        raise ValueError("nothing to aggregate")
    return sum(r.errors for r in results) / sum(r.ref_len for r in results)


def improved_fraction(multi: Sequence[float], best_single: Sequence[float]) -> float:
    """Share of utterances whose multi-stream rate is the same as or lower than the best single stream."""
    if len(multi) != len(best_single):
        raise ValueError(f"{len(multi)} multi-stream rates vs {len(best_single)} single-stream rates")
    if not multi:
        raise ValueError("no utterances")
    return sum(1 for a, b in zip(multi, best_single) if a <= b) / len(multi)


SCORE_FIELDS = ["utt_id", "ref", "hyp", "S", "D", "I", "rate"]


def write_score_csv(path, rows: List[dict], stamp: Optional[dict] = None) -> None:
    """Per-utterance scores; ``stamp`` entries (e.g. config hash, seed) become constant trailing columns."""
    stamp = stamp or {}
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SCORE_FIELDS + sorted(stamp), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, **stamp})


def score_rows(refs: dict, hyps: dict) -> List[dict]:
    rows = []
    for utt in sorted(refs):
        e = edit_distance_align(refs[utt], hyps.get(utt, []))
        rows.append({"utt_id": utt, "ref": " ".join(map(str, refs[utt])), "hyp": " ".join(map(str, hyps.get(utt, []))),
                     "S": e.substitutions, "D": e.deletions, "I": e.insertions, "rate": e.rate})
    return rows


def summary(rows: List[dict]) -> dict:
    tot = {k: sum(r[k] for r in rows) for k in ("S", "D", "I")}
    ref_len = sum(len(r["ref"].split()) for r in rows)
    return {**tot, "ref_len": ref_len, "ter": (tot["S"] + tot["D"] + tot["I"]) / ref_len, "n_utts": len(rows)}


def write_summary(path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


def as_dict(e: ErrorBreakdown) -> dict:
    return {**asdict(e), "rate": e.rate}
