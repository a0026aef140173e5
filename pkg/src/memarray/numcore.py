"""Numeric substrate: stable reductions, parameter groups, layers with hand-written backward passes."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional

import numpy as np

Grads = Optional[Dict[str, np.ndarray]]


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


# ---------------------------------------------------------------- randomness

def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def derive_rng(seed: int, *path) -> np.random.Generator:
    """Independent Philox stream for ``seed`` and a name path, e.g. ``derive_rng(3, "corpus", "utt17")``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------- reductions

def softmax_stable(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of empty vector")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    m = v.max(axis=-1, keepdims=True)
    z = v - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_sum_exp(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of empty vector")
    m = v.max()
    if m == -np.inf:
        return -np.inf
    return float(m + np.log(np.exp(v - m).sum()))


def logaddexp_arr(a, b):
    # np.logaddexp(-inf, -inf) is -inf without warnings on numpy >= 1.x
    return np.logaddexp(a, b)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------- parameters

@dataclass
class ParamGroup:
    """Named tensors that are frozen or trained together."""

    name: str
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    frozen: bool = False

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]

    def copy(self, name: str | None = None) -> "ParamGroup":
        return ParamGroup(name or self.name, {k: v.copy() for k, v in self.tensors.items()}, self.frozen)

    def zeros_like(self) -> Dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in sorted(self.tensors)]) if self.tensors else np.zeros(0)


def uniform_init(rng: np.random.Generator, shapes: Mapping[str, tuple], scale: float = 0.1) -> Dict[str, np.ndarray]:
    return {k: rng.uniform(-scale, scale, size=s) for k, s in shapes.items()}


class GradStore:
    """Gradient accumulators mirroring a set of parameter groups; frozen groups get ``None``."""

    def __init__(self, groups: Mapping[str, ParamGroup]):
        self.groups = groups
        self.grads: Dict[str, Grads] = {
            name: (None if g.frozen else g.zeros_like()) for name, g in groups.items()
        }

    def __getitem__(self, name: str) -> Grads:
        return self.grads[name]

    def get(self, name: str) -> Grads:
        return self.grads.get(name)

    def zero(self) -> None:
        for g in self.grads.values():
            if g is not None:
                for v in g.values():
                    v.fill(0.0)

    def scale(self, c: float) -> None:
        for g in self.grads.values():
            if g is not None:
                for v in g.values():
                    v *= c

    def global_norm(self) -> float:
        tot = 0.0
        for g in self.grads.values():
            if g is not None:
                for v in g.values():
                    tot += float(np.dot(v.ravel(), v.ravel()))
        return float(np.sqrt(tot))


def acc(grads: Grads, key: str, value) -> None:
    if grads is not None:
        grads[key] += value


# ---------------------------------------------------------------- dense layer

def _check_dense(p: ParamGroup, x: np.ndarray, prefix: str):
    W = p.tensors[prefix + "W"]
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense {p.name}/{prefix}: input dim {x.shape[-1]} != {W.shape[0]}")
    return W, p.tensors[prefix + "b"]


def dense_forward(p: ParamGroup, x, prefix: str = "") -> np.ndarray:
    W, b = _check_dense(p, np.asarray(x), prefix)
    return np.asarray(x) @ W + b


def dense_backward(p: ParamGroup, x, dy, grads: Grads, prefix: str = "") -> np.ndarray:
    """Accumulate dW, db into ``grads`` and return dx."""
    W = p.tensors[prefix + "W"]
    x2 = np.atleast_2d(x)
    dy2 = np.atleast_2d(dy)
    acc(grads, prefix + "W", x2.T @ dy2)
    acc(grads, prefix + "b", dy2.sum(axis=0))
    return np.asarray(dy) @ W.T


# ---------------------------------------------------------------- gated recurrent cell
#
# z = sig(x Wx_z + h Wh_z + b_z)      update gate
# r = sig(x Wx_r + h Wh_r + b_r)      reset gate
# n = tanh(x Wx_n + (r*h) Wh_n + b_n)
# h' = (1 - z) * n + z * h

def gru_shapes(n_in: int, n_hid: int, prefix: str = "") -> Dict[str, tuple]:
    return {prefix + "Wx": (n_in, 3 * n_hid), prefix + "Wh": (n_hid, 3 * n_hid), prefix + "b": (3 * n_hid,)}


def gru_cell_step(p: ParamGroup, state, inp, prefix: str = "", xw=None):
    """One step; returns (new_state, cache). ``xw`` lets callers precompute ``inp @ Wx + b``."""
    Wx, Wh = p.tensors[prefix + "Wx"], p.tensors[prefix + "Wh"]
    H = Wh.shape[0]
    h = np.asarray(state, dtype=np.float64)
    if h.shape != (H,):
        raise ShapeError(f"gru {p.name}/{prefix}: state shape {h.shape} != ({H},)")
    if xw is None:
        x = np.asarray(inp, dtype=np.float64)
        if x.shape != (Wx.shape[0],):
            raise ShapeError(f"gru {p.name}/{prefix}: input shape {x.shape} != ({Wx.shape[0]},)")
        xw = x @ Wx + p.tensors[prefix + "b"]
    zr = sigmoid(xw[: 2 * H] + h @ Wh[:, : 2 * H])
    z, r = zr[:H], zr[H:]
    rh = r * h
    n = np.tanh(xw[2 * H:] + rh @ Wh[:, 2 * H:])
    h_new = (1.0 - z) * n + z * h
    return h_new, (h, z, r, rh, n)


def gru_cell_backward(p: ParamGroup, cache, dh_new, grads: Grads, prefix: str = ""):
    """Returns (dh_prev, dpre) where dpre is the gradient on ``x @ Wx + b`` (length 3H).

    Callers propagate dpre into Wx, b and the input themselves so sequence code can batch it.
    """
    Wh = p.tensors[prefix + "Wh"]
    h, z, r, rh, n = cache
    H = h.shape[0]
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    dn_pre = dn * (1.0 - n * n)
    drh = Wh[:, 2 * H:] @ dn_pre
    dh += drh * r
    dr = drh * h
    dzr_pre = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)])
    dh += Wh[:, : 2 * H] @ dzr_pre
    if grads is not None:
        gWh = grads[prefix + "Wh"]
        gWh[:, : 2 * H] += np.outer(h, dzr_pre)
        gWh[:, 2 * H:] += np.outer(rh, dn_pre)
    return dh, np.concatenate([dzr_pre, dn_pre])


def gru_sequence_forward(p: ParamGroup, X: np.ndarray, prefix: str = "", reverse: bool = False):
    """Run a GRU over the rows of X from a zero state; returns (outputs T×H, caches)."""
    Wx = p.tensors[prefix + "Wx"]
    H = p.tensors[prefix + "Wh"].shape[0]
    if X.shape[1] != Wx.shape[0]:
        raise ShapeError(f"gru {p.name}/{prefix}: input dim {X.shape[1]} != {Wx.shape[0]}")
    XW = X @ Wx + p.tensors[prefix + "b"]
    T = X.shape[0]
    out = np.empty((T, H))
    caches = [None] * T
    h = np.zeros(H)
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        h, caches[t] = gru_cell_step(p, h, None, prefix, xw=XW[t])
        out[t] = h
    return out, caches


def gru_sequence_backward(p: ParamGroup, X, caches, dOut, grads: Grads, prefix: str = "", reverse: bool = False):
    T, H = dOut.shape
    dpre = np.empty((T, 3 * H))
    dh = np.zeros(H)
    order = range(T) if reverse else range(T - 1, -1, -1)
    for t in order:
        dh, dpre[t] = gru_cell_backward(p, caches[t], dh + dOut[t], grads, prefix)
    acc(grads, prefix + "Wx", X.T @ dpre)
    acc(grads, prefix + "b", dpre.sum(axis=0))
    return dpre @ p.tensors[prefix + "Wx"].T


# ---------------------------------------------------------------- gradient checking

def grad_check(
    f: Callable[[], tuple],
    groups: Iterable[ParamGroup] | ParamGroup,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f()`` returns ``(value, grads)`` with ``grads[group_name][tensor_name]``; it must read the
    group arrays live, since they are perturbed in place (and restored) coordinate by coordinate.
    Frozen groups are skipped. Relative error uses max(|a|, |n|, 1e-8) as denominator.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    if isinstance(groups, ParamGroup):
        groups = [groups]
    value, analytic = f()
    if not np.isfinite(value):
        raise NumericError("non-finite objective")
    worst = 0.0
    for g in groups:
        if g.frozen:
            continue
        for key, arr in g.tensors.items():
            gflat = np.asarray(analytic[g.name][key]).reshape(-1)
            flat = arr.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + eps
                fp = f()[0]
                flat[i] = old - eps
                fm = f()[0]
                flat[i] = old
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError(f"non-finite objective while checking {g.name}/{key}[{i}]")
                num = (fp - fm) / (2.0 * eps)
                a = gflat[i]
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    return worst
