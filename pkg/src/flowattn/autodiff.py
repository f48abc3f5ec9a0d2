"""Dense reverse-mode automatic differentiation on top of numpy arrays.

Every differentiable operation returns a new :class:`Tensor` that remembers
its inputs and a closure mapping the output gradient to input gradients.
Tensors carry a global creation sequence number, so sorting the reachable
operations by that number reproduces the tape in execution order.
"""

from __future__ import annotations

import contextlib
import dataclasses
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPE = np.float64
_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeConsumedError(RuntimeError):
    pass


def set_default_dtype(dtype) -> None:
    """Switch the floating point type used for new tensors (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError("only float64 and float32 are supported")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording operations (inference)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=_DTYPE) if not isinstance(data, np.ndarray) \
            or data.dtype != _DTYPE else data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = next(_seq)
        self.name = name

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from exc


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def dropout(a, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity when ``train`` is false or ``rate`` is 0."""
    a = as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# shape and linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError("matmul supports 1-D and 2-D operands only")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad

    return _make(ad @ bd, (a, b), backward_fn)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def index(a, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)

    def backward_fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(ts), backward_fn)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward_fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def linear(x, W, b=None) -> Tensor:
    """``x @ W.T + b`` with ``W`` stored as (out, in)."""
    out = matmul(x, transpose(W))
    return out if b is None else add(out, b)


# segment operations

def _check_segments(segment_ids, num_segments: int, length: int) -> np.ndarray:
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != (length,):
        raise ShapeError(f"segment_ids must have shape ({length},), got {seg.shape}")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ValueError(f"segment ids must lie in [0, {num_segments})")
    return seg


def _segsum(values: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    if values.ndim == 1:
        return np.bincount(seg, weights=values, minlength=n).astype(values.dtype, copy=False)
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, seg, values)
    return out


def segment_sum(values, segment_ids, num_segments: int) -> Tensor:
    """Row ``i`` of the result sums the rows whose segment id is ``i``; empty segments are zero."""
    v = as_tensor(values)
    if v.ndim == 0:
        raise ShapeError("segment_sum expects at least one dimension")
    seg = _check_segments(segment_ids, num_segments, v.shape[0])
    return _make(_segsum(v.data, seg, num_segments), (v,), lambda g: (g[seg],))


def segment_softmax(scores, segment_ids, num_segments: int) -> Tensor:
    """Softmax of a score vector within each segment, max-shifted for stability."""
    s = as_tensor(scores)
    if s.ndim != 1:
        raise ShapeError("segment_softmax expects a vector of scores")
    seg = _check_segments(segment_ids, num_segments, s.shape[0])
    if s.size == 0:
        return _make(s.data.copy(), (s,), lambda g: (g,))
    mx = np.full(num_segments, -np.inf, dtype=s.data.dtype)
    np.maximum.at(mx, seg, s.data)
    ex = np.exp(s.data - mx[seg])
    den = _segsum(ex, seg, num_segments)
    out = ex / den[seg]

    def backward_fn(g):
        dot = _segsum(g * out, seg, num_segments)
        return (out * (g - dot[seg]),)

    return _make(out, (s,), backward_fn)


def segment_max(values, segment_ids, num_segments: int) -> Tensor:
    """Column-wise max per segment; ties route the gradient to the first row."""
    v = as_tensor(values)
    if v.ndim != 2:
        raise ShapeError("segment_max expects a matrix")
    seg = _check_segments(segment_ids, num_segments, v.shape[0])
    if np.any(np.bincount(seg, minlength=num_segments) == 0):
        raise ValueError("segment_max over an empty segment is undefined")
    out = np.full((num_segments, v.shape[1]), -np.inf, dtype=v.data.dtype)
    np.maximum.at(out, seg, v.data)
    rows, cols = np.nonzero(v.data == out[seg])
    arg = np.full(out.shape, v.shape[0], dtype=np.int64)
    np.minimum.at(arg, (seg[rows], cols), rows)

    def backward_fn(g):
        full = np.zeros(v.shape, dtype=g.dtype)
        np.add.at(full, (arg, np.broadcast_to(np.arange(v.shape[1]), arg.shape)), g)
        return (full,)

    return _make(out, (v,), backward_fn)


# GRU

@dataclass
class GruParams:
    """Gate weights; W* map the input (hidden x input), U* the state (hidden x hidden)."""

    Wr: Tensor
    Wz: Tensor
    Wn: Tensor
    Ur: Tensor
    Uz: Tensor
    Un: Tensor
    br: Tensor
    bz: Tensor
    bn: Tensor

    @property
    def hidden_dim(self) -> int:
        return self.Ur.shape[0]

    @property
    def input_dim(self) -> int:
        return self.Wr.shape[1]


def init_gru(rng: np.random.Generator, input_dim: int, hidden_dim: int,
             scale: float | None = None) -> GruParams:
    bound = scale if scale is not None else 1.0 / np.sqrt(hidden_dim)

    def u(*shape):
        return parameter(rng.uniform(-bound, bound, size=shape))

    return GruParams(
        Wr=u(hidden_dim, input_dim), Wz=u(hidden_dim, input_dim), Wn=u(hidden_dim, input_dim),
        Ur=u(hidden_dim, hidden_dim), Uz=u(hidden_dim, hidden_dim), Un=u(hidden_dim, hidden_dim),
        br=u(hidden_dim), bz=u(hidden_dim), bn=u(hidden_dim),
    )


def gru_cell(h, m, p: GruParams) -> Tensor:
    """One GRU step with state ``h`` and input ``m`` (rows are independent samples).

    r = sig(Wr m + Ur h + br), z = sig(Wz m + Uz h + bz),
    n = tanh(Wn m + r * (Un h) + bn), h' = (1 - z) * n + z * h
    """
    h, m = as_tensor(h), as_tensor(m)
    vector = h.ndim == 1
    if vector:
        h, m = reshape(h, (1, -1)), reshape(m, (1, -1))
    if h.shape[1] != p.hidden_dim or m.shape[1] != p.input_dim or h.shape[0] != m.shape[0]:
        raise ShapeError(
            f"gru_cell got state {h.shape} and input {m.shape} for hidden={p.hidden_dim}, "
            f"input={p.input_dim}"
        )
    r = sigmoid(linear(m, p.Wr) + linear(h, p.Ur) + p.br)
    z = sigmoid(linear(m, p.Wz) + linear(h, p.Uz) + p.bz)
    n = tanh(linear(m, p.Wn) + r * linear(h, p.Un) + p.bn)
    out = (1.0 - z) * n + z * h
    return reshape(out, (-1,)) if vector else out


# tape and backward

class Tape:
    """The operations reachable from an output, in execution order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def _consumed(_g):
    raise TapeConsumedError("the tape for this tensor was already consumed by backward()")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape, then free the tape."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError(f"loss is not finite: {loss.data}")
    if not loss.requires_grad:
        return
    if loss._backward is _consumed:
        _consumed(None)
    tape = Tape.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        if node._backward is _consumed:
            _consumed(None)
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
        node._parents = ()
        node._backward = _consumed
    for node in tape.nodes:
        if node.grad is not None and not np.all(np.isfinite(node.grad)):
            raise NonFiniteError(f"non-finite gradient in {node!r}")


# parameter trees

def named_tensors(tree, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses, dicts, lists and tuples, yielding every Tensor with a dotted name."""
    if isinstance(tree, Tensor):
        yield prefix, tree
    elif dataclasses.is_dataclass(tree) and not isinstance(tree, type):
        for f in dataclasses.fields(tree):
            yield from named_tensors(getattr(tree, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(tree, dict):
        for k in tree:
            yield from named_tensors(tree[k], f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(tree, (list, tuple)):
        for i, item in enumerate(tree):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))


def parameters(tree) -> list[Tensor]:
    return [t for _, t in named_tensors(tree) if t.requires_grad]


def zero_grad(tree) -> None:
    for t in parameters(tree):
        t.grad = None


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
               eps: float = 1e-6) -> float:
    """Largest relative error between backprop gradients and central differences.

    Relative error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f(params)
    if not np.isfinite(loss.item()):
        raise NonFiniteError("objective is not finite at the base point")
    backward(loss)
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = f(params).item()
                flat[k] = orig - eps
                down = f(params).item()
                flat[k] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NonFiniteError("objective is not finite near the base point")
                numeric = (up - down) / (2.0 * eps)
                a = analytic.reshape(-1)[k]
                err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, err)
    return worst
