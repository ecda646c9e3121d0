"""Small dense-tensor engine with reverse-mode autodiff.

Every differentiable op records a :class:`Node` on its output tensor. Calling
:func:`backward` on a scalar loss walks the recorded graph in reverse
topological order, accumulates gradients into ``grad`` slots and then drops
the graph so the next forward pass starts clean.

All arithmetic is float64.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when an op receives inputs with incompatible shapes."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out`` in a tensor and attach the graph node if any input needs grad.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    t = Tensor(out)
    if _grad_enabled and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        t.node = Node(op, inputs, backward_fn)
    return t


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (evaluation)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _need(shape_ok: bool, op: str, detail: str) -> None:
    if not shape_ok:
        raise ShapeError(op, detail)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _need(a.shape == b.shape, "add", f"shapes {a.shape} and {b.shape} differ")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _need(a.shape == b.shape, "mul", f"shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return record("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need(a.data.ndim == 2 and b.data.ndim == 2, "matmul",
          f"expected 2-D operands, got {a.shape} and {b.shape}")
    _need(a.shape[1] == b.shape[0], "matmul",
          f"inner dimensions differ: {a.shape[1]} (lhs {a.shape}) vs {b.shape[0]} (rhs {b.shape})")
    ad, bd = a.data, b.data
    return record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature bias. ``x`` is (N, F) or (N, C, H, W); ``bias`` is (F,) or (C,)."""
    _need(bias.data.ndim == 1, "add_bias", f"bias must be 1-D, got {bias.shape}")
    _need(x.data.ndim in (2, 4) and x.shape[1] == bias.shape[0], "add_bias",
          f"feature dimension {x.shape[1] if x.data.ndim > 1 else None} of {x.shape} "
          f"does not match bias length {bias.shape[0]}")
    if x.data.ndim == 2:
        out = x.data + bias.data
        return record("add_bias", out, (x, bias), lambda g: (g, g.sum(axis=0)))
    out = x.data + bias.data[None, :, None, None]
    return record("add_bias", out, (x, bias), lambda g: (g, g.sum(axis=(0, 2, 3))))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible to the divergence guard
    return record("relu", np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def flatten(x: Tensor) -> Tensor:
    _need(x.data.ndim >= 2, "flatten", f"expected a batched tensor, got {x.shape}")
    shape = x.shape
    out = x.data.reshape(shape[0], -1)
    return record("flatten", out, (x,), lambda g: (g.reshape(shape),))


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(N, C, H, W) -> (N*out_h*out_w, C*kh*kw), columns ordered (c, ky, kx)."""
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=DTYPE)
    for ky in range(kh):
        y_end = ky + stride * oh
        for kx in range(kw):
            x_end = kx + stride * ow
            cols[:, :, ky, kx] = xp[:, :, ky:y_end:stride, kx:x_end:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into an image."""
    n, c, h, w = x_shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for ky in range(kh):
        y_end = ky + stride * oh
        for kx in range(kw):
            x_end = kx + stride * ow
            xp[:, :, ky:y_end:stride, kx:x_end:stride] += cols[:, :, ky, kx]
    return xp[:, :, padding:padding + h, padding:padding + w]


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (O, C, KH, KW) kernel."""
    _need(x.data.ndim == 4, "conv2d", f"input must be 4-D (N, C, H, W), got {x.shape}")
    _need(weight.data.ndim == 4, "conv2d", f"kernel must be 4-D (O, C, KH, KW), got {weight.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = weight.shape
    _need(c == kc, "conv2d", f"input channels {c} do not match kernel channels {kc}")
    _need(stride >= 1 and padding >= 0, "conv2d", f"bad stride {stride} / padding {padding}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    _need(oh > 0 and ow > 0, "conv2d",
          f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    cols = im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    x_shape = x.shape

    def backward_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape)
        gx = col2im(g2 @ wmat, x_shape, kh, kw, stride, padding)
        return gx, gw

    return record("conv2d", np.ascontiguousarray(out), (x, weight), backward_fn)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    _need(logits.data.ndim == 2, "softmax_cross_entropy", f"logits must be (N, C), got {logits.shape}")
    _need(labels.shape == (logits.shape[0],), "softmax_cross_entropy",
          f"labels shape {labels.shape} does not match batch size {logits.shape[0]}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ShapeError("softmax_cross_entropy", f"labels outside [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsumexp - z[rows, labels])

    def backward_fn(g):
        p = np.exp(z - logsumexp[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return record("softmax_cross_entropy", np.array(loss), (logits,), backward_fn)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

class Graph:
    """Topologically ordered view of the ops that produced ``root``."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for parent in t.node.inputs:
                    if id(parent) not in seen:
                        stack.append((parent, False))
        self.tensors = order

    @property
    def nodes(self) -> list[Node]:
        return [t.node for t in self.tensors if t.node is not None]

    def leaves(self) -> list[Tensor]:
        return [t for t in self.tensors if t.node is None and t.requires_grad]


def backward(loss: Tensor) -> None:
    if loss.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ValueError("backward called on a tensor with no recorded graph")
    graph = Graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    for t in reversed(graph.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    for t in graph.tensors:
        t.node = None


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class SGD:
    """SGD with classic (heavy-ball) momentum and L2 weight decay.

    ``params`` is either a list of tensors or a list of group dicts
    ``{"params": [...], "lr": ..., "weight_decay": ...}``; group keys override
    the defaults.
    """

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {weight_decay}")
        params = list(params)
        if params and isinstance(params[0], Tensor):
            params = [{"params": params}]
        self.groups = []
        for group in params:
            g = {"lr": lr, "momentum": momentum, "weight_decay": weight_decay}
            g.update(group)
            g["params"] = list(g["params"])
            self.groups.append(g)
        self.buffers: dict[int, np.ndarray] = {}

    @property
    def params(self) -> list[Tensor]:
        return [p for g in self.groups for p in g["params"]]

    def scale_lr(self, factor: float) -> None:
        for g in self.groups:
            g.setdefault("base_lr", g["lr"])
            g["lr"] = g["base_lr"] * factor

    def step(self) -> None:
        for group in self.groups:
            for p in group["params"]:
                if p.grad is None:
                    raise ValueError(f"parameter {p.name or p.shape} has no gradient")
        for group in self.groups:
            lr, mom, wd = group["lr"], group["momentum"], group["weight_decay"]
            for p in group["params"]:
                d = p.grad + wd * p.data if wd else p.grad
                if mom:
                    buf = self.buffers.get(id(p))
                    buf = d.copy() if buf is None else mom * buf + d
                    self.buffers[id(p)] = buf
                    d = buf
                p.data = p.data - lr * d
                p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
