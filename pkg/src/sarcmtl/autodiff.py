"""Dense rank-2 tensors with a reverse-mode tape.

Every value is a 2-D float64 array. Operations performed while a :class:`Tape`
is active are recorded in creation order, which is already a topological
order, so :func:`backward` only has to walk the tape in reverse once.

    >>> W = Tensor.param([[1.0, 2.0], [3.0, 4.0]])
    >>> with Tape() as tape:
    ...     loss = total(mul(W, W))
    >>> grads = backward(tape, loss)
    >>> grads[W].tolist()
    [[2.0, 4.0], [6.0, 8.0]]
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

DTYPE = np.float64

# Logits are clipped to this magnitude inside the fused losses.
LOGIT_CAP = 20.0


class DimensionError(ValueError):
    pass


class InvalidMaskError(ValueError):
    pass


class Tensor:
    """A 2-D float64 array, optionally tracked for gradients."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(value, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim > 2:
            raise DimensionError(f"tensors are at most rank 2, got shape {arr.shape}")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def param(cls, value, name: str | None = None) -> "Tensor":
        return cls(np.array(value, dtype=DTYPE), requires_grad=True, name=name)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass(frozen=True)
class Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    op: str


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; operations on tracked tensors inside the block are
    appended to ``nodes``. Tapes are thread-local, so independent examples may be
    differentiated on separate threads.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)


_state = threading.local()


def _active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def _record(value: np.ndarray, parents: tuple[Tensor, ...], bw, op: str) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.requires_grad = track
    out.name = None
    if track:
        tape.nodes.append(Node(out, parents, bw, op))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        return g @ bv.T, av.T @ g

    return _record(av @ bv, (a, b), bw, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.value * c, (a,), lambda g: (g * c,), "scale")


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """Add a 1 x cols row vector to every row of ``x`` (bias add)."""
    if row.shape != (1, x.shape[1]):
        raise DimensionError(f"add_row: row {row.shape} does not fit {x.shape}")
    return _record(x.value + row.value, (x, row),
                   lambda g: (g, g.sum(axis=0, keepdims=True)), "add_row")


def mul_col(x: Tensor, col: Tensor) -> Tensor:
    """Scale each row of ``x`` by the matching entry of an rows x 1 column."""
    if col.shape != (x.shape[0], 1):
        raise DimensionError(f"mul_col: column {col.shape} does not fit {x.shape}")
    xv, cv = x.value, col.value
    return _record(xv * cv, (x, col),
                   lambda g: (g * cv, (g * xv).sum(axis=1, keepdims=True)), "mul_col")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.value)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    on = x.value > 0
    monitor = getattr(_state, "kinks", None)
    if monitor is not None:
        monitor.append(on)
    return _record(x.value * on, (x,), lambda g: (g * on,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xv = x.value
    t = np.tanh(_GELU_C * (xv + 0.044715 * xv ** 3))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xv * xv)

    def bw(g):
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * dt),)

    return _record(0.5 * xv * (1.0 + t), (x,), bw, "gelu")


_ELEMENTWISE = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "gelu": gelu,
                "mul": mul, "add": add}


def elementwise(kind: str, *args: Tensor) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*args)


def transpose(x: Tensor) -> Tensor:
    return _record(x.value.T, (x,), lambda g: (g.T,), "transpose")


def take(x: Tensor, rows=slice(None), cols=slice(None)) -> Tensor:
    """Sub-block ``x[rows, cols]`` for basic slices."""
    shape = x.shape
    key = (rows, cols)

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[key] = g
        return (full,)

    return _record(x.value[key], (x,), bw, "take")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.intp)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"gather_rows: id out of range for table with {n} rows")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids, g)
        return (full,)

    return _record(table.value[ids], (table,), bw, "gather_rows")


def concat_cols(parts: list[Tensor]) -> Tensor:
    rows = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows:
            raise DimensionError(
                f"concat_cols: row counts differ {[q.shape for q in parts]}")
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.value for p in parts], axis=1),
                   tuple(parts), bw, "concat_cols")


def softmax_masked(logits: Tensor, mask) -> Tensor:
    """Row-wise softmax where masked-out columns get probability exactly 0.

    ``mask`` is a boolean vector over columns (shared by every row) or a boolean
    array of the same shape as ``logits``.
    """
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.shape[1] != logits.shape[1] or m.shape[0] not in (1, logits.shape[0]):
        raise DimensionError(f"softmax_masked: mask {m.shape} vs logits {logits.shape}")
    if not m.any(axis=1).all():
        raise InvalidMaskError("softmax_masked: every row needs at least one unmasked position")
    z = np.where(m, logits.value, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record(p, (logits,), bw, "softmax_masked")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then apply gain and bias."""
    d = x.shape[1]
    if gain.shape != (1, d) or bias.shape != (1, d):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs {x.shape}")
    mu = x.value.mean(axis=1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value

    def bw(g):
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _record(xhat * gv + bias.value, (x, gain, bias), bw, "layer_norm")


def total(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.array([[x.value.sum()]]), (x,),
                   lambda g: (np.full(shape, g[0, 0]),), "total")


def bce_with_logits(logit: Tensor, y: int) -> Tensor:
    """Binary cross-entropy of a 1x1 logit against a 0/1 label."""
    if logit.shape != (1, 1):
        raise DimensionError(f"bce_with_logits: expected a 1x1 logit, got {logit.shape}")
    if y not in (0, 1):
        raise ValueError(f"sarcasm label must be 0 or 1, got {y!r}")
    z0 = logit.value[0, 0]
    z = min(max(z0, -LOGIT_CAP), LOGIT_CAP)
    # log(1 + e^z) - y z, in the form that cannot overflow
    loss = max(z, 0.0) - y * z + np.log1p(np.exp(-abs(z)))
    live = -LOGIT_CAP < z0 < LOGIT_CAP
    p = float(_sigmoid(np.array([z]))[0])

    def bw(g):
        return (g * ((p - y) if live else 0.0),)

    return _record(np.array([[loss]]), (logit,), bw, "bce_with_logits")


def cross_entropy(logits: Tensor, y: int) -> Tensor:
    """Categorical cross-entropy of 1 x k logits against class index ``y``."""
    k = logits.shape[1]
    if logits.shape[0] != 1:
        raise DimensionError(f"cross_entropy: expected 1 x k logits, got {logits.shape}")
    if not 0 <= y < k:
        raise ValueError(f"class label {y!r} outside [0, {k})")
    raw = logits.value[0]
    z = np.clip(raw, -LOGIT_CAP, LOGIT_CAP)
    zmax = z.max()
    lse = zmax + np.log(np.exp(z - zmax).sum())
    loss = lse - z[y]
    p = np.exp(z - lse)
    onehot = np.zeros(k)
    onehot[y] = 1.0
    live = np.abs(raw) < LOGIT_CAP

    def bw(g):
        return (g * ((p - onehot) * live).reshape(1, k),)

    return _record(np.array([[loss]]), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass

def backward(tape: Tape, loss: Tensor, weight: float = 1.0) -> dict[Tensor, np.ndarray]:
    """Propagate d(weight * loss) back through ``tape``.

    Gradients of leaf tensors (those with ``requires_grad`` that were not
    produced on the tape) are *accumulated* into their ``.grad``; the returned
    map holds every such leaf touched by this tape.
    """
    if loss.shape != (1, 1):
        raise DimensionError(f"backward: loss must be scalar (1x1), got {loss.shape}")
    produced = set()
    for node in tape.nodes:
        produced.add(id(node.out))
        node.out.grad = None
    grads: dict[int, np.ndarray] = {id(loss): np.full((1, 1), weight, dtype=DTYPE)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if key not in produced:
                leaves[key] = parent
    out = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


@dataclass
class GradCheckResult:
    max_rel_err: float
    worst_param: str | None
    worst_index: tuple[int, int] | None
    analytic: float
    numeric: float
    n_checked: int
    # coordinates whose +-eps window crosses a relu kink; central differences
    # are not a derivative there, so they are excluded and listed
    kink_skipped: list[tuple[str, tuple[int, int]]] = field(default_factory=list)

    def __str__(self) -> str:
        where = f"{self.worst_param}{list(self.worst_index)}" if self.worst_index else "-"
        return (f"max relative error {self.max_rel_err:.3e} at {where} "
                f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e}); "
                f"{self.n_checked} coordinates checked, "
                f"{len(self.kink_skipped)} skipped at relu kinks")


def relative_error(a: float, n: float, floor: float = 1e-8) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def _evaluate(f: Callable[[], Tensor], watch_kinks: bool):
    _state.kinks = [] if watch_kinks else None
    try:
        value = f().item()
        return value, _state.kinks
    finally:
        _state.kinks = None


def _same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(f: Callable[[], Tensor], params: Mapping[str, Tensor],
                      eps: float = 1e-3, floor: float = 1e-8,
                      skip_kinks: bool = True, richardson: bool = False) -> GradCheckResult:
    """Compare tape gradients of ``f()`` with central differences.

    ``f`` rebuilds the scalar loss from the current parameter values. Every
    coordinate of every tensor in ``params`` is perturbed in place (and
    restored). Relative error is ``|a - n| / max(|a|, |n|, floor)``. With
    ``skip_kinks`` a coordinate is excluded when some relu input changes sign
    inside its ``+-eps`` window. With ``richardson`` the step-``eps`` and
    step-``eps/2`` central differences are combined as ``(4 D(eps/2) - D(eps)) / 3``,
    which cancels the ``eps**2`` truncation term. Never raises on disagreement.
    """
    for p in params.values():
        p.zero_grad()
    _state.kinks = [] if skip_kinks else None
    try:
        with Tape() as tape:
            loss = f()
        base_pattern = _state.kinks
    finally:
        _state.kinks = None
    backward(tape, loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros(p.shape))
                for name, p in params.items()}

    worst = GradCheckResult(0.0, None, None, 0.0, 0.0, 0)
    skipped = []
    count = 0
    for name, p in params.items():
        vals = p.value
        for idx in np.ndindex(vals.shape):
            orig = vals[idx]
            steps = (eps, eps / 2) if richardson else (eps,)
            diffs, crossed = [], False
            for h in steps:
                vals[idx] = orig + h
                up, pat_up = _evaluate(f, skip_kinks)
                vals[idx] = orig - h
                down, pat_down = _evaluate(f, skip_kinks)
                vals[idx] = orig
                diffs.append((up - down) / (2.0 * h))
                if skip_kinks and not (_same_pattern(pat_up, base_pattern)
                                       and _same_pattern(pat_down, base_pattern)):
                    crossed = True
                    break
            coord = tuple(int(i) for i in idx)
            if crossed:
                skipped.append((name, coord))
                continue
            num = (4.0 * diffs[1] - diffs[0]) / 3.0 if richardson else diffs[0]
            a = float(analytic[name][idx])
            err = relative_error(a, num, floor)
            count += 1
            if err > worst.max_rel_err or worst.worst_param is None:
                worst = GradCheckResult(err, name, coord, a, num, 0)
    worst.n_checked = count
    worst.kink_skipped = skipped
    for p in params.values():
        p.zero_grad()
    return worst
