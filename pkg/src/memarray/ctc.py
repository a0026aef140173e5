"""Per-stream CTC: projection, log-domain forward/backward loss, prefix scores, brute-force oracle.

Lattice column 0 is blank; output label ``k`` lives in column ``k + 1``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numcore import Grads, ParamGroup, ShapeError, log_softmax, uniform_init

NEG_INF = -np.inf
BLANK = 0


class CtcInfeasible(ValueError):
    """The label sequence cannot be aligned to the available frames."""


class InstanceTooLarge(ValueError):
    pass


def init_ctc(rng, enc_dim: int, vocab_size: int, name: str = "ctc", scale: float = 0.1) -> ParamGroup:
    return ParamGroup(name, uniform_init(rng, {"W": (enc_dim, vocab_size + 1), "b": (vocab_size + 1,)}, scale))


def ctc_project(p: ParamGroup, h: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax of ``h W + b``: a T' x (|U|+1) lattice of log-probabilities."""
    W = p.tensors["W"]
    if h.shape[1] != W.shape[0]:
        raise ShapeError(f"ctc {p.name}: feature dim {h.shape[1]} != {W.shape[0]}")
    return log_softmax(h @ W + p.tensors["b"])


def ctc_project_backward(p: ParamGroup, h: np.ndarray, logprobs: np.ndarray, dlogprobs: np.ndarray,
                         grads: Grads) -> np.ndarray:
    dz = dlogprobs - np.exp(logprobs) * dlogprobs.sum(axis=1, keepdims=True)
    if grads is not None:
        grads["W"] += h.T @ dz
        grads["b"] += dz.sum(axis=0)
    return dz @ p.tensors["W"].T


def min_frames(labels: Sequence[int]) -> int:
    """Fewest frames that can carry ``labels`` (a blank must separate repeats)."""
    return len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def _extended(labels: Sequence[int]):
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = np.asarray(labels, dtype=np.int64) + 1
    skip = np.zeros(ext.size, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    return ext, skip


def _forward(lp: np.ndarray, ext: np.ndarray, skip: np.ndarray) -> np.ndarray:
    T, S = lp.shape[0], ext.size
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    em = lp[:, ext]
    for t in range(1, T):
        a = alpha[t - 1]
        cand = a.copy()
        cand[1:] = np.logaddexp(cand[1:], a[:-1])
        cand[2:] = np.where(skip[2:], np.logaddexp(cand[2:], a[:-2]), cand[2:])
        alpha[t] = cand + em[t]
    return alpha


def _backward(lp: np.ndarray, ext: np.ndarray, skip: np.ndarray) -> np.ndarray:
    T, S = lp.shape[0], ext.size
    beta = np.full((T, S), NEG_INF)
    em = lp[:, ext]
    beta[T - 1, S - 1] = em[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = em[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        b = beta[t + 1]
        cand = b.copy()
        cand[:-1] = np.logaddexp(cand[:-1], b[1:])
        cand[:-2] = np.where(skip[2:], np.logaddexp(cand[:-2], b[2:]), cand[:-2])
        beta[t] = cand + em[t]
    return beta


def _check(lp: np.ndarray, labels: Sequence[int]):
    if len(labels) < 1:
        raise ValueError("empty transcript")
    V = lp.shape[1] - 1
    if any(not (0 <= c < V) for c in labels):
        raise ValueError(f"label id outside [0, {V})")
    if lp.shape[0] < min_frames(labels):
        raise CtcInfeasible(f"{len(labels)} labels need {min_frames(labels)} frames, lattice has {lp.shape[0]}")


def ctc_forward_loss(lp: np.ndarray, labels: Sequence[int]) -> float:
    """-log p(labels | lattice) by the blank-interleaved forward recursion."""
    lp = np.asarray(lp, dtype=np.float64)
    _check(lp, labels)
    ext, skip = _extended(labels)
    alpha = _forward(lp, ext, skip)
    ll = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    if ll == NEG_INF:
        raise CtcInfeasible("no alignment with non-zero probability")
    return float(-ll)


def ctc_loss_and_grad(lp: np.ndarray, labels: Sequence[int]):
    """Loss and its gradient with respect to the lattice log-probabilities."""
    lp = np.asarray(lp, dtype=np.float64)
    _check(lp, labels)
    ext, skip = _extended(labels)
    alpha = _forward(lp, ext, skip)
    beta = _backward(lp, ext, skip)
    ll = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    if ll == NEG_INF:
        raise CtcInfeasible("no alignment with non-zero probability")
    occ = np.exp(alpha + beta - lp[:, ext] - ll)
    occ[~np.isfinite(occ)] = 0.0
    grad = np.zeros_like(lp)
    for s in range(ext.size):
        grad[:, ext[s]] -= occ[:, s]
    return float(-ll), grad


def collapse(path: Sequence[int]) -> tuple:
    """Merge repeats, then drop blanks; returns label ids (column - 1)."""
    out = []
    prev = None
    for k in path:
        if k != prev and k != BLANK:
            out.append(k - 1)
        prev = k
    return tuple(out)


def ctc_brute_force(lp: np.ndarray, labels: Sequence[int], limit: int = 10**6) -> float:
    """Enumerate every frame path; -log of the total probability of paths collapsing to ``labels``."""
    lp = np.asarray(lp, dtype=np.float64)
    T, K = lp.shape
    if K ** T > limit:
        raise InstanceTooLarge(f"{K}^{T} paths exceeds {limit}")
    target = tuple(labels)
    total = 0.0
    p = np.exp(lp)
    for path in itertools.product(range(K), repeat=T):
        if collapse(path) == target:
            prob = 1.0
            for t, k in enumerate(path):
                prob *= p[t, k]
            total += prob
    return float(-np.log(total)) if total > 0 else np.inf


# ---------------------------------------------------------------- prefix scoring

@dataclass(frozen=True)
class CtcPrefixState:
    gamma_n: np.ndarray  # log prob of the prefix with paths ending in a non-blank, per frame
    gamma_b: np.ndarray  # ... ending in blank
    last: Optional[int]  # last label id of the prefix, None for the empty prefix

    def p_end(self) -> float:
        """log-probability that the full labeling is exactly this prefix."""
        return float(np.logaddexp(self.gamma_n[-1], self.gamma_b[-1]))


def ctc_prefix_init(lp: np.ndarray) -> CtcPrefixState:
    lp = np.asarray(lp, dtype=np.float64)
    return CtcPrefixState(np.full(lp.shape[0], NEG_INF), np.cumsum(lp[:, BLANK]), None)


def ctc_prefix_extend_all(st: CtcPrefixState, lp: np.ndarray, labels: Sequence[int]):
    """Extend one prefix by each of ``labels`` at once.

    Returns (gamma_n, gamma_b, alpha) with shapes (T, C), (T, C), (C,), where alpha[j] is the
    log-probability of all labelings that start with prefix + labels[j].
    """
    cs = np.asarray(labels, dtype=np.int64)
    T = lp.shape[0]
    x = lp[:, cs + 1]
    blank = lp[:, BLANK]
    gn = np.full((T, cs.size), NEG_INF)
    gb = np.full((T, cs.size), NEG_INF)
    if st.last is None:
        gn[0] = x[0]
    phi = np.repeat(np.logaddexp(st.gamma_n, st.gamma_b)[:, None], cs.size, axis=1)
    if st.last is not None:
        phi[:, cs == st.last] = st.gamma_b[:, None]
    psi = gn[0].copy()
    for t in range(1, T):
        gn[t] = np.logaddexp(gn[t - 1], phi[t - 1]) + x[t]
        gb[t] = np.logaddexp(gn[t - 1], gb[t - 1]) + blank[t]
        psi = np.logaddexp(psi, phi[t - 1] + x[t])
    return gn, gb, psi


def ctc_prefix_extend(st: CtcPrefixState, lp: np.ndarray, c: int):
    """Extend ``st`` by label ``c``; returns (new state, prefix log-probability)."""
    gn, gb, psi = ctc_prefix_extend_all(st, lp, [c])
    return CtcPrefixState(gn[:, 0], gb[:, 0], int(c)), float(psi[0])

