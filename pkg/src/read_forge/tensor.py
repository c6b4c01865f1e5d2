"""Dense float64 tensors with reverse-mode differentiation over an explicit tape.

Every differentiable op appends a :class:`Node` to the active :class:`Tape`
(if any input requires grad). A node keeps references only to what its
backward rule needs, and the tape sums the bytes of those references in
``saved_bytes``. Tensors flagged ``persistent`` (parameters, cached backbone
intermediates) are owned elsewhere and are not charged to the tape.

Typical use::

    tape = Tape()
    with tape:
        loss = model.loss(batch)
    grads = backward(tape, loss)
"""

from __future__ import annotations

import contextlib
import contextvars
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from .errors import (
    ConfigError,
    DimensionError,
    EvaluationError,
    LineageError,
    ShapeError,
)

DTYPE = np.float64
LN_EPS = 1e-6

# Finite-output checks after each forward op; enable with READ_FORGE_DEBUG=1.
DEBUG = os.environ.get("READ_FORGE_DEBUG", "") not in ("", "0")

_current_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "read_forge_tape", default=None
)
_recording: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "read_forge_recording", default=True
)


class Tensor:
    """A float64 array plus a requires-grad flag.

    ``persistent`` marks storage that outlives a training step (weights,
    frozen-backbone caches); the tape never counts it as activation memory.
    """

    __slots__ = ("data", "requires_grad", "name", "persistent", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 persistent: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.persistent = persistent
        self._tape: Tape | None = None  # set when produced by a recorded node

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, persistent=self.persistent)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))


def parameter(data, name: str | None = None, requires_grad: bool = True) -> Tensor:
    """A persistent leaf tensor: weights never count as tape activations."""
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad, name=name,
                  persistent=True)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: tuple = ()
    nbytes: int = 0


def _saved_arrays(saved: Iterable) -> Iterator[np.ndarray]:
    for item in saved:
        if isinstance(item, Tensor):
            if not item.persistent:
                yield item.data
        elif isinstance(item, np.ndarray):
            yield item


@dataclass(eq=False)
class Tape:
    """Ordered record of differentiable ops and the activations they retain."""

    nodes: list[Node] = field(default_factory=list)
    saved_bytes: int = 0
    peak_bytes: int = 0
    consumed: bool = False
    _tokens: list = field(default_factory=list, repr=False)
    _seen: set = field(default_factory=set, repr=False)

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise LineageError("tape was already consumed by backward()")
        self._tokens.append(_current_tape.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _current_tape.reset(self._tokens.pop())

    def record(self, node: Node) -> None:
        # An array kept alive by several nodes is charged once, to the first.
        nbytes = 0
        for arr in _saved_arrays(node.saved):
            if id(arr) not in self._seen:
                self._seen.add(id(arr))
                nbytes += arr.nbytes
        node.nbytes = nbytes
        self.nodes.append(node)
        self.saved_bytes += node.nbytes
        self.peak_bytes = max(self.peak_bytes, self.saved_bytes)

    def bytes_by_op(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for node in self.nodes:
            out[node.op] = out.get(node.op, 0) + node.nbytes
        return out


def current_tape() -> Tape | None:
    return _current_tape.get()


@contextlib.contextmanager
def frozen() -> Iterator[None]:
    """Run ops without recording anything, whatever their inputs' flags."""
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


def is_recording() -> bool:
    return _recording.get() and _current_tape.get() is not None


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...],
          make_backward: Callable[[tuple[bool, ...]], tuple[Callable, tuple]]) -> Tensor:
    """Wrap a forward result; record a node when some input requires grad.

    ``make_backward(needs)`` returns ``(backward_fn, saved)`` and is only
    called when recording, so frozen passes allocate nothing for backward.
    """
    if DEBUG and not np.all(np.isfinite(data)):
        raise EvaluationError(f"{op} produced non-finite values")
    out = Tensor(data)
    tape = _current_tape.get()
    if tape is None or not _recording.get():
        return out
    needs = tuple(t.requires_grad for t in inputs)
    if not any(needs):
        return out
    backward_fn, saved = make_backward(needs)
    out.requires_grad = True
    out._tape = tape
    tape.record(Node(op, inputs, out, backward_fn, saved))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def make(needs):
        def bw(g):
            return (_unbroadcast(g, sa) if needs[0] else None,
                    _unbroadcast(g, sb) if needs[1] else None)
        return bw, ()

    return _emit("add", a.data + b.data, (a, b), make)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def make(needs):
        return (lambda g: (-g,)), ()

    return _emit("neg", -a.data, (a,), make)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def make(needs):
        # grad wrt a needs b and vice versa
        saved = tuple(t for t, need in ((b, needs[0]), (a, needs[1])) if need)

        def bw(g):
            return (_unbroadcast(g * b.data, sa) if needs[0] else None,
                    _unbroadcast(g * a.data, sb) if needs[1] else None)
        return bw, saved

    return _emit("mul", a.data * b.data, (a, b), make)


def _fold_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b``; a stacked left operand against a plain matrix runs as one 2-D product."""
    if a.ndim > 2 and b.ndim == 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
    return a @ b


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    sa, sb = a.shape, b.shape

    def make(needs):
        saved = tuple(t for t, need in ((b, needs[0]), (a, needs[1])) if need)

        def bw(g):
            ga = gb = None
            if needs[0]:
                ga = _unbroadcast(_fold_matmul(g, np.swapaxes(b.data, -1, -2)), sa)
            if needs[1]:
                if b.ndim == 2:
                    # fold the batch axes into one product instead of summing per-batch products
                    gb = a.data.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, sb)
            return ga, gb
        return bw, saved

    return _emit("matmul", _fold_matmul(a.data, b.data), (a, b), make)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def make(needs):
        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return bw, ()

    return _emit("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), make)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def make(needs):
        return (lambda g: (g.reshape(old),)), ()

    return _emit("reshape", x.data.reshape(shape), (x,), make)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def make(needs):
        return (lambda g: (np.transpose(g, inverse),)), ()

    return _emit("transpose", np.transpose(x.data, axes), (x,), make)


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)

    def make(needs):
        def bw(g):
            full = np.zeros(shape, dtype=DTYPE)
            if basic:
                full[index] += g
            else:
                np.add.at(full, index, g)
            return (full,)
        return bw, ()

    return _emit("getitem", x.data[index], (x,), make)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def make(needs):
        def bw(g):
            parts = np.split(g, bounds, axis=axis)
            return tuple(p if need else None for p, need in zip(parts, needs))
        return bw, ()

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, make)


# ---------------------------------------------------------------------------
# Nonlinearities and normalisation
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


_UNARY = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "sigmoid": (_sigmoid, lambda y: y * (1.0 - y)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda y: (y > 0).astype(DTYPE)),
}


def apply_unary(x: Tensor, f: str) -> Tensor:
    """Elementwise ``tanh``, ``sigmoid`` or ``relu``; the backward rule uses the output."""
    try:
        fwd, dfdy = _UNARY[f]
    except KeyError:
        raise ConfigError(f"unknown activation {f!r}; expected one of {sorted(_UNARY)}") from None
    x = _as_tensor(x)
    y = fwd(x.data)

    def make(needs):
        return (lambda g: (g * dfdy(y),)), (y,)

    return _emit(f, y, (x,), make)


def tanh(x: Tensor) -> Tensor:
    return apply_unary(x, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    return apply_unary(x, "sigmoid")


def relu(x: Tensor) -> Tensor:
    return apply_unary(x, "relu")


def gru_gates(gi: Tensor, gh: Tensor, h_prev: Tensor) -> Tensor:
    """GRU update from input-side and hidden-side pre-activations, gate order (r, z, n).

    ``h' = (1 - z) * n + z * h_prev`` with ``n = tanh(gi_n + r * gh_n)``.
    One node replaces the dozen elementwise ops of the composed form.
    """
    gi, gh, h_prev = _as_tensor(gi), _as_tensor(gh), _as_tensor(h_prev)
    h = h_prev.shape[-1]
    if gi.shape[-1] != 3 * h or gh.shape[-1] != 3 * h:
        raise DimensionError(f"gru_gates expects 3*{h} pre-activations, got {gi.shape} and {gh.shape}")
    r = expit(gi.data[..., :h] + gh.data[..., :h])
    z = expit(gi.data[..., h:2 * h] + gh.data[..., h:2 * h])
    gh_n = gh.data[..., 2 * h:]
    n = np.tanh(gi.data[..., 2 * h:] + r * gh_n)
    out = (1.0 - z) * n + z * h_prev.data

    def make(needs):
        def bw(g):
            dn = g * (1.0 - z) * (1.0 - n * n)
            dr = dn * gh_n * r * (1.0 - r)
            dz = g * (h_prev.data - n) * z * (1.0 - z)
            dgi = np.concatenate([dr, dz, dn], axis=-1)
            dgh = np.concatenate([dr, dz, dn * r], axis=-1) if needs[1] else None
            return (_unbroadcast(dgi, gi.shape) if needs[0] else None,
                    _unbroadcast(dgh, gh.shape) if needs[1] else None,
                    _unbroadcast(g * z, h_prev.shape) if needs[2] else None)
        return bw, (r, z, n, gh_n, h_prev)

    return _emit("gru_gates", out, (gi, gh, h_prev), make)


def lstm_gates(gates: Tensor, c_prev: Tensor) -> Tensor:
    """LSTM update from summed pre-activations, gate order (i, f, g, o).

    Returns ``concat([h', c'], -1)``; callers split the two halves.
    """
    gates, c_prev = _as_tensor(gates), _as_tensor(c_prev)
    h = c_prev.shape[-1]
    if gates.shape[-1] != 4 * h:
        raise DimensionError(f"lstm_gates expects 4*{h} pre-activations, got {gates.shape}")
    i = expit(gates.data[..., :h])
    f = expit(gates.data[..., h:2 * h])
    gg = np.tanh(gates.data[..., 2 * h:3 * h])
    o = expit(gates.data[..., 3 * h:])
    c = f * c_prev.data + i * gg
    tc = np.tanh(c)
    out = np.concatenate([o * tc, c], axis=-1)

    def make(needs):
        def bw(g):
            dh, dc_direct = g[..., :h], g[..., h:]
            dc = dc_direct + dh * o * (1.0 - tc * tc)
            dgates = np.concatenate([dc * gg * i * (1.0 - i), dc * c_prev.data * f * (1.0 - f),
                                     dc * i * (1.0 - gg * gg), dh * tc * o * (1.0 - o)], axis=-1)
            return (_unbroadcast(dgates, gates.shape) if needs[0] else None,
                    _unbroadcast(dc * f, c_prev.shape) if needs[1] else None)
        return bw, (i, f, gg, o, tc, c_prev)

    return _emit("lstm_gates", out, (gates, c_prev), make)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def make(needs):
        def bw(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
        return bw, (y,)

    return _emit("softmax", y, (x,), make)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis: ``(x - mean) / sqrt(var + eps) * gain + bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs a last axis of size >= 2, got {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    y = xhat * gain.data + bias.data

    def make(needs):
        if needs[0]:
            saved = (xhat, rstd, gain)
        elif needs[1]:
            saved = (xhat,)
        else:
            saved = ()

        def bw(g):
            gx = gg = gb = None
            if needs[0]:
                gh = g * gain.data
                gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                             - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            if needs[1]:
                gg = _unbroadcast(g * xhat, gain.shape)
            if needs[2]:
                gb = _unbroadcast(g, bias.shape)
            return gx, gg, gb
        return bw, saved

    return _emit("layer_norm", y, (x, gain, bias), make)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; the integer ids are retained for backward."""
    ids = np.asarray(ids)

    def make(needs):
        def bw(g):
            full = np.zeros(weight.shape, dtype=DTYPE)
            np.add.at(full, ids, g)
            return (full,)
        return bw, (ids,)

    return _emit("embedding", weight.data[ids], (weight,), make)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean token cross-entropy over positions where ``mask`` is true."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    weights = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=DTYPE)
    count = max(weights.sum(), 1.0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * weights).sum() / count

    def make(needs):
        probs = np.exp(logp)

        def bw(g):
            grad = probs.copy()
            np.put_along_axis(grad, targets[..., None],
                              np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
            return (grad * (weights / count)[..., None] * g,)
        return bw, (probs, targets, weights)

    return _emit("cross_entropy", np.asarray(loss), (logits,), make)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


class GradientMap(dict):
    """Leaf tensor -> gradient array of the same shape."""

    def by_name(self) -> dict[str, np.ndarray]:
        return {t.name: g for t, g in self.items() if t.name is not None}


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    """Reverse-sweep ``tape`` from scalar ``loss``; consumes the tape."""
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if tape.consumed:
        raise LineageError("tape was already consumed")
    if loss._tape is not tape:
        raise LineageError("loss was not produced under this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp._tape is None:
                leaves[key] = inp

    out = GradientMap()
    for key, tensor in leaves.items():
        out[tensor] = grads[key]
    tape.nodes.clear()
    tape._seen.clear()
    tape.saved_bytes = 0
    tape.consumed = True
    return out


def finite_difference_gradient(f: Callable[[], float | Tensor], p: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central differences of the zero-argument scalar ``f`` w.r.t. ``p.data``.

    ``p.data`` is perturbed on a private copy and restored afterwards, so
    arrays shared with other tensors are never touched.
    """
    if not h > 0:
        raise ConfigError(f"step must be positive, got {h}")
    original = p.data
    work = original.copy()
    grad = np.zeros_like(work)

    def evaluate() -> float:
        value = f()
        value = value.item() if isinstance(value, Tensor) else float(value)
        if not np.isfinite(value):
            raise EvaluationError("objective returned a non-finite value")
        return value

    p.data = work
    try:
        flat = work.reshape(-1)
        for i in range(flat.size):
            x0 = flat[i]
            flat[i] = x0 + h
            fp = evaluate()
            flat[i] = x0 - h
            fm = evaluate()
            flat[i] = x0
            grad.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    finally:
        p.data = original
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute difference scaled by the larger of the two max magnitudes."""
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-300)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)
