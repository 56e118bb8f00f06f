"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds a new :class:`Tensor` holding references to its inputs and a
closure that maps the output gradient to input gradients.  :func:`backward`
topologically sorts the graph hanging off a scalar and runs the closures in
reverse, accumulating into the ``grad`` of every leaf that requires it.

Convolutions use NHWC activations.  ``conv2d`` kernels are laid out
``[kh, kw, Cin, Cout]`` and ``conv2d_transpose`` kernels ``[kh, kw, Cout, Cin]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import GraphError, ShapeError

__all__ = [
    "Tensor",
    "Graph",
    "tensor",
    "add",
    "sub",
    "mul",
    "matmul",
    "relu",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "take",
    "dropout",
    "conv2d",
    "conv2d_transpose",
    "conv_output_size",
    "backward",
    "grad_check",
]


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self._consumed = False

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), bw, "relu")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    scale = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def bw(g):
        return (g * scale,)

    return _make(x.data * scale, (x,), bw, "dropout")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------- reductions and reshapes


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")

    def bw(g):
        return (np.full(x.shape, g.reshape(()) / n),)

    return _make(np.asarray(x.data.mean()).reshape(1), (x,), bw, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(data, (x,), bw, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    inverse = None if axes is None else np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(x.data, axes), (x,), bw, "transpose")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one part")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat off-axis mismatch: {ref} vs {p.shape} along axis {axis}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([p.data for p in parts], axis=ax), parts, bw, "concat")


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along a new axis."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("stack needs at least one part")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape != ref:
            raise ShapeError(f"stack shape mismatch: {ref} vs {p.shape}")
    ax = axis % (len(ref) + 1)
    return concat([reshape(p, ref[:ax] + (1,) + ref[ax:]) for p in parts], axis=ax)


def take(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``x[index]``; the backward pass scatter-adds."""
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        out = np.zeros(x.shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), bw, "take")


# ---------------------------------------------------------------- convolution


def conv_output_size(n: int, k: int, s: int) -> int:
    """Valid-padding output extent, ``floor((n - k) / s) + 1``."""
    return (n - k) // s + 1


def _gather_windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :]
    return cols


def _scatter_windows(cols: np.ndarray, hp: int, wp: int, sh: int, sw: int) -> np.ndarray:
    n, ho, wo, kh, kw, c = cols.shape
    out = np.zeros((n, hp, wp, c))
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :] += cols[:, :, :, i, j, :]
    return out


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def _transpose_padding(k: int, s: int) -> tuple[int, int]:
    total = max(k - s, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=(1, 1), padding=((0, 0), (0, 0))) -> Tensor:
    """Strided cross-correlation, valid padding unless ``padding`` is given.

    ``padding`` is ``((top, bottom), (left, right))``; it exists so the
    transposed convolution's adjoint can be expressed, layers never set it.
    """
    sh, sw = _pair(stride)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and 4-D kernel, got {x.shape} and {kernel.shape}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
    (pt, pb), (pl, pr) = padding
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than input {hp}x{wp}")
    ho, wo = conv_output_size(hp, kh, sh), conv_output_size(wp, kw, sw)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    cols = _gather_windows(xp, kh, kw, sh, sw, ho, wo).reshape(n * ho * wo, kh * kw * cin)
    wmat = kernel.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(n * ho * wo, cout)
        gx = gk = gb = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            gx = _scatter_windows(gcols, hp, wp, sh, sw)[:, pt : pt + h, pl : pl + w, :]
        if kernel.requires_grad:
            gk = (cols.T @ g2).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw, "conv2d")


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=(1, 1)) -> Tensor:
    """Transposed convolution producing ``[N, H*sh, W*sw, Cout]``.

    It is the exact adjoint of :func:`conv2d` applied to an ``H*sh x W*sw``
    image padded by ``max(k - s, 0)`` split floor-first, which for ``k <= s``
    is plain valid padding.
    """
    sh, sw = _pair(stride)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d_transpose expects NHWC input and 4-D kernel, got {x.shape} and {kernel.shape}")
    n, h, w, cin = x.shape
    kh, kw, cout, kcin = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d_transpose channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d_transpose bias shape {bias.shape} != ({cout},)")
    (pt, pb), (pl, pr) = _transpose_padding(kh, sh), _transpose_padding(kw, sw)
    ho, wo = h * sh, w * sw
    hp, wp = ho + pt + pb, wo + pl + pr
    wmat = kernel.data.reshape(kh * kw * cout, cin)
    x2 = x.data.reshape(n * h * w, cin)
    cols = (x2 @ wmat.T).reshape(n, h, w, kh, kw, cout)
    out = _scatter_windows(cols, hp, wp, sh, sw)[:, pt : pt + ho, pl : pl + wo, :]
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gp = np.pad(g, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else g
        gcols = _gather_windows(gp, kh, kw, sh, sw, h, w).reshape(n * h * w, kh * kw * cout)
        gx = gk = gb = None
        if x.requires_grad:
            gx = (gcols @ wmat).reshape(x.shape)
        if kernel.requires_grad:
            gk = (gcols.T @ x2).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(np.ascontiguousarray(out), parents, bw, "conv2d_transpose")


# ---------------------------------------------------------------- graph and backward


@dataclass
class Graph:
    """Nodes reachable from an output, inputs always before their consumers."""

    nodes: list[Tensor] = field(default_factory=list)
    outputs: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(out, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack_.append((parent, False))
        return cls(nodes=order, outputs=[out])


def backward(scalar: Tensor, graph: Graph | None = None) -> None:
    """Populate ``grad`` of every ``requires_grad`` leaf feeding ``scalar``.

    Gradients accumulate (sum) into existing ``grad`` buffers; a graph can be
    consumed once, rebuild it with a fresh forward pass.
    """
    if scalar.size != 1:
        raise GraphError(f"backward needs a single-element tensor, got shape {scalar.shape}")
    if scalar._consumed:
        raise GraphError("backward already ran on this graph; run a new forward pass first")
    if not scalar.requires_grad:
        raise GraphError("output does not depend on any tensor that requires grad")
    graph = graph or Graph.from_output(scalar)
    grads: dict[int, np.ndarray] = {id(scalar): np.ones(scalar.shape)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    scalar._consumed = True


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    ``fn`` is called with the input tensors and must return a scalar.  The
    relative error per entry is ``|a - n| / (|a| + |n| + 1e-12)``.
    """
    inputs = list(inputs)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    if out.size != 1:
        raise GraphError("grad_check function must return a scalar")
    if out.requires_grad:
        backward(out)
    worst = 0.0
    for pos, t in enumerate(inputs):
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            values = []
            for step in (eps, -eps):
                flat[i] = saved + step
                probe = [Tensor(u.data.copy()) for u in inputs]
                values.append(fn(*probe).item())
            flat[i] = saved
            numeric = (values[0] - values[1]) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12))
    return worst
