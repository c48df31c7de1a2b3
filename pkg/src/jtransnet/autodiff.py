"""Small reverse-mode automatic differentiation engine over numpy arrays.

Tensors carry float64 data. Every primitive records a closure that maps the
output adjoint to input adjoints; :meth:`Tensor.backward` replays them in
reverse topological order. Leading batch dimensions broadcast the numpy way,
and adjoints are summed back down to each operand's shape.

Inside a :func:`no_grad` block no graph is recorded, which is how the
misreport enumeration runs thousands of forwards cheaply.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "Tensor",
    "tensor",
    "constant",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "broadcast",
    "reshape",
    "reduce_sum",
    "mean",
    "absolute",
    "relu",
    "sigmoid",
    "row_softmax",
    "layer_norm",
    "scaled_dot_attention",
    "concat",
    "index_select",
    "finite_diff_check",
]


class AutodiffError(ValueError):
    """Shape mismatch, non-finite value, or misuse of backward."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise AutodiffError("non-finite value in tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise AutodiffError("loss does not depend on any tensor requiring grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        adj: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in node._backward(g):
                if parent is None or not parent.requires_grad:
                    continue
                key = id(parent)
                adj[key] = pg if key not in adj else adj[key] + pg


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _finite(data: np.ndarray) -> bool:
    # a single reduction is cheaper than an elementwise mask; recheck on overflow
    total = np.add.reduce(data, axis=None)
    return bool(np.isfinite(total)) or bool(np.all(np.isfinite(data)))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not _finite(data):
        raise AutodiffError(f"non-finite result in {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise AutodiffError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return _make(a.data * b.data, (a, b), bw, "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: ((a, -g),), "neg")


def scale(a, factor: float) -> Tensor:
    """Multiply by a python scalar (no adjoint for the scalar)."""
    a = _as_tensor(a)
    factor = float(factor)
    return _make(a.data * factor, (a,), lambda g: ((a, g * factor),), "scale")


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy semantics; both operands rank >= 2."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise AutodiffError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise AutodiffError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise AutodiffError(f"matmul: incompatible batch shapes {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

    return _make(out, (a, b), bw, "matmul")


def broadcast(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise AutodiffError(f"cannot broadcast {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g: ((a, _unbroadcast(g, a.shape)),), "broadcast")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise AutodiffError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: ((a, g.reshape(a.shape)),), "reshape")


def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw, "reduce_sum")


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def absolute(a) -> Tensor:
    # subgradient at exactly 0 is taken as 0
    a = _as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: ((a, g * np.sign(a.data)),), "abs")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: ((a, g * mask),), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: ((a, g * s * (1.0 - s)),), "sigmoid")


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def row_softmax(a, tau: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``a / tau``."""
    if not tau > 0:
        raise AutodiffError(f"softmax temperature must be positive, got {tau}")
    a = _as_tensor(a)
    y = _softmax(a.data / tau)

    def bw(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((a, y * (g - inner) / tau),)

    return _make(y, (a,), bw, "row_softmax")


def layer_norm(a, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        d = a.shape[-1]
        ga = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True) / d)
        return ((a, ga),)

    out = _make(xhat, (a,), bw, "layer_norm")
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def scaled_dot_attention(q, k, v) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise AutodiffError(f"attention: incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    c = 1.0 / np.sqrt(q.shape[-1])
    kt = np.swapaxes(k.data, -1, -2)
    w = _softmax(np.matmul(q.data, kt) * c)
    out = np.matmul(w, v.data)

    def bw(g):
        gv = np.matmul(np.swapaxes(w, -1, -2), g)
        gw = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * c
        gq = np.matmul(gs, k.data)
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data)
        return (
            (q, _unbroadcast(gq, q.shape)),
            (k, _unbroadcast(gk, k.shape)),
            (v, _unbroadcast(gv, v.shape)),
        )

    return _make(out, (q, k, v), bw, "attention")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise AutodiffError("concat of empty sequence")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise AutodiffError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(zip(ts, np.split(g, splits, axis=axis)))

    return _make(out, ts, bw, "concat")


def index_select(a, indices, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    if idx.size and (idx.min() < -a.shape[ax] or idx.max() >= a.shape[ax]):
        raise AutodiffError(f"index_select: index out of range for axis of size {a.shape[ax]}")
    out = np.take(a.data, idx, axis=ax)

    def bw(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return ((a, ga),)

    return _make(out, (a,), bw, "index_select")


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    num_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max of |autodiff - central difference| / max(1, |central difference|).

    ``f`` recomputes the scalar loss from the current values of ``params``;
    it is evaluated repeatedly with single coordinates nudged by +/- step.
    With ``num_coords`` set, that many coordinates are sampled overall.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    if loss.requires_grad:
        loss.backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    coords = [(pi, flat) for pi, p in enumerate(params) for flat in range(p.data.size)]
    if num_coords is not None and num_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(coords), size=num_coords, replace=False)
        coords = [coords[i] for i in sorted(picks)]

    worst = 0.0
    with no_grad():
        for pi, flat in coords:
            view = params[pi].data.reshape(-1)
            orig = view[flat]
            view[flat] = orig + step
            up = float(f().data)
            view[flat] = orig - step
            down = float(f().data)
            view[flat] = orig
            numeric = (up - down) / (2.0 * step)
            got = float(analytic[pi].reshape(-1)[flat])
            worst = max(worst, abs(got - numeric) / max(1.0, abs(numeric)))
    return worst
