"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records its parents and a closure mapping the output
gradient to parent gradients. :func:`backward` orders the reachable nodes
topologically and replays the closures in reverse, visiting each node once.
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Iterable, Mapping

import numpy as np

from .errors import InvalidInputError, InvalidShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidShapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Graph:
    """Operations reachable from an output, in topological order (inputs first)."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    When ``params`` is given, returns their gradients in order; parameters the
    loss does not reach get zeros.
    """
    if loss.size != 1:
        raise InvalidShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        graph = Graph(loss)
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(graph.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), _bw, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), _bw, "mul")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU (smooth everywhere, so finite differences apply)."""
    x2 = x.data * x.data  # explicit products: ** dispatches to a slow pow
    t = np.tanh(_GELU_C * (x.data + 0.044715 * x2 * x.data))
    out = 0.5 * x.data * (1.0 + t)

    def _bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _make(out, (x,), _bw, "gelu")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or no generator is given."""
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# shape


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


# reductions


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def tensor_mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),), "mean")


# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes, with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise InvalidShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise InvalidShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def _bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), _bw, "matmul")


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range for table of {weight.shape[0]} rows")

    def _bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), _bw, "embedding")


# normalisation


def softmax_array(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, with per-row max subtraction.

    ``mask`` (broadcastable booleans, True = keep) zeroes excluded entries.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise InvalidShapeError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    p = softmax_array(x.data, mask)

    def _bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), _bw, "softmax")


def log_softmax_array(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise InvalidShapeError(f"log_softmax needs a non-empty last axis, got shape {x.shape}")
    out = log_softmax_array(x.data)

    def _bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), _bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def _bw(g):
        dxhat = g * gain.data
        dx = rstd * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), _bw, "layer_norm")


# losses


def label_smoothed_cross_entropy(logits: Tensor, targets, smoothing: float = 0.0, mask=None) -> Tensor:
    """Mean smoothed cross-entropy over unmasked positions.

    The target distribution puts ``1 - smoothing`` on the gold id and
    ``smoothing / (V - 1)`` on every other id.
    """
    if not 0.0 <= smoothing < 1.0:
        raise InvalidInputError(f"smoothing must lie in [0, 1), got {smoothing}")
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != flat.shape[0]:
        raise InvalidShapeError(f"{targets.shape[0]} targets for {flat.shape[0]} logit rows")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of range for vocabulary of size {vocab}")
    if smoothing > 0 and vocab < 2:
        raise InvalidShapeError("label smoothing needs at least two classes")
    weights = np.ones(targets.shape[0]) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    count = weights.sum()
    if count <= 0:
        raise InvalidInputError("no unmasked positions to score")

    q = np.full(flat.shape, smoothing / (vocab - 1) if vocab > 1 else 0.0)
    rows = np.arange(targets.shape[0])
    q[rows, targets] = 1.0 - smoothing
    logp = log_softmax_array(flat)
    per_pos = -(q * logp).sum(axis=-1)
    loss = (per_pos * weights).sum() / count
    shape = logits.shape

    def _bw(g):
        d = (np.exp(logp) - q) * (weights / count)[:, None]
        return ((g * d).reshape(shape),)

    return _make(np.asarray(loss), (logits,), _bw, "smoothed_xent")


# gradient utilities


def global_norm(grads) -> float:
    arrays = grads.values() if isinstance(grads, Mapping) else grads
    total = 0.0
    for g in arrays:
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_grad_norm(grads, max_norm: float):
    """Rescale gradients so their global L2 norm is at most ``max_norm``.

    Accepts a list or a name->array mapping; returns ``(clipped, norm)``
    where ``norm`` is the global norm before clipping. The scale is nudged
    down by ulps until the clipped norm does not exceed ``max_norm``, which
    makes the operation idempotent.
    """
    if max_norm <= 0:
        raise InvalidInputError(f"max_norm must be positive, got {max_norm}")
    is_map = isinstance(grads, Mapping)
    items = list(grads.items()) if is_map else list(enumerate(grads))
    norm = global_norm([g for _, g in items])
    if norm > max_norm:
        scale = max_norm / norm
        while True:
            scaled = [(k, g * scale) for k, g in items]
            if global_norm([g for _, g in scaled]) <= max_norm:
                break
            scale = np.nextafter(scale, 0.0)
        items = scaled
    else:
        items = [(k, np.array(g, dtype=np.float64, copy=True)) for k, g in items]
    clipped = dict(items) if is_map else [g for _, g in items]
    return clipped, norm
