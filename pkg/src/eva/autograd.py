"""Dense float64 arrays with a reverse-mode differentiation tape.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  ``backward``
walks the recorded graph in reverse topological order.

Conventions:

* max / argmax route the whole gradient to the first maximal element.
* layer_norm uses the population variance with ``eps`` inside the sqrt.
* broadcasting follows numpy's trailing-axis rule (extents equal or 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: operands with shapes {a} and {b} do not broadcast") from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                   _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner),)

    return _make(out, (a,), backward, "gelu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


# ---------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def tmax(a, axis: int = -1) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal element."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _make(out, (a,), backward, "max")


def argmax(a, axis: int = -1) -> np.ndarray:
    """Index of the first maximum; not differentiable."""
    return np.argmax(as_tensor(a).data, axis=axis)


# ---------------------------------------------------------------- normalisation


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis (no affine part)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (a,), backward, "layer_norm")


def l2_normalize(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    y = x / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (a,), backward, "l2_normalize")


# ---------------------------------------------------------------- indexing


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    basic = _is_basic_index(index)

    def backward(g):
        grad = np.zeros_like(a.data)
        if basic:
            grad[index] += g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _make(np.array(out, dtype=DTYPE), (a,), backward, "getitem")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (embedding lookup when axis=0)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    n = a.shape[axis]
    if indices.size and (indices.min() < -n or indices.max() >= n):
        raise IndexError(f"take: index out of range for axis {axis} of extent {n}")
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        grad = np.zeros_like(a.data)
        moved = np.moveaxis(grad, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (grad,)

    return _make(out, (a,), backward, "take")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack: shapes {ts[0].shape} and {t.shape} differ")

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, backward, "stack")


def topk_mask(logits, k: int) -> tuple[Tensor, np.ndarray]:
    """Keep the ``k`` largest entries along the last axis, set the rest to -inf.

    Ties go to the lower index.  Returns the masked tensor and the selected
    indices (shape ``(..., k)``, in descending logit order).
    """
    logits = as_tensor(logits)
    x = logits.data
    # stable argsort on -x keeps lower indices first among equal logits
    order = np.argsort(-x, axis=-1, kind="stable")[..., :k]
    keep = np.zeros(x.shape, dtype=bool)
    np.put_along_axis(keep, order, True, axis=-1)
    out = np.where(keep, x, -np.inf)
    return _make(out, (logits,), lambda g: (np.where(keep, g, 0.0),), "topk_mask"), order


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for each named parameter (zeros if unreached)."""
    for p in params.values():
        p.grad = None
    backward(loss)
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    return out


# ---------------------------------------------------------------- graphs


@dataclass
class Graph:
    """A forward function bound to named trainable and frozen tensors.

    ``fn(inputs)`` must build its result from ``params``/``frozen`` (it
    usually closes over them) and return a mapping of named tensors.
    """

    fn: Callable[[Mapping[str, np.ndarray]], Mapping[str, Tensor]]
    params: dict[str, Tensor]
    frozen: dict[str, Tensor] = field(default_factory=dict)
    signature: dict[str, tuple[int, ...]] | None = None

    def forward(self, inputs: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        if self.signature is not None:
            for name, shape in self.signature.items():
                if name not in inputs:
                    raise ShapeError(f"forward: missing input {name!r}")
                got = np.shape(inputs[name])
                if tuple(got) != tuple(shape):
                    raise ShapeError(f"forward: input {name!r} has shape {got}, expected {shape}")
        return dict(self.fn(inputs))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        return grad(loss, self.params)


def forward(graph: Graph, inputs: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return graph.forward(inputs)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def finite_diff_check(
    graph: Graph,
    inputs: Mapping[str, np.ndarray],
    loss_name: str,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, scalar by scalar.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    round-off on near-zero gradients from dominating.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    loss = graph.forward(inputs)[loss_name]
    analytic = graph.backward(loss)
    worst, worst_name, count = 0.0, "", 0
    for name in names if names is not None else graph.params:
        p = graph.params[name]
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = graph.forward(inputs)[loss_name].item()
            flat[i] = orig - epsilon
            fm = graph.forward(inputs)[loss_name].item()
            flat[i] = orig
            num = (fp - fm) / (2 * epsilon)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
            count += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{i}]"
    return GradCheckReport(worst, worst_name, count, tolerance)
