"""
Reverse-mode differentiation over dense float64 grids.

A ``Node`` holds a value, the tag of the operation that produced it and references to
its parents. Each operation below computes its value eagerly and registers a closure that
pushes the upstream gradient to its parents. ``backward`` walks the graph in reverse
topological order from a scalar root.

Only what the localizer/classifier pair and the objective need is implemented. Shapes
must match exactly, with one exception: ``mul`` broadcasts an operand whose channel axis
(axis 1) has size 1 against a multi-channel operand, which is how a mask is applied to an
image.
"""
import math
from numbers import Real
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Node:
    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "_backward")
    __array_priority__ = 100

    def __init__(self, value, parents: Sequence["Node"] = (), op: str = "leaf", requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, np.ndarray) else constant(-other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if not isinstance(other, Real):
            raise TypeError("Node division is only defined for scalar divisors")
        return mul(self, 1.0 / other)


def variable(value) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def constant(value) -> Node:
    return Node(np.array(value, dtype=np.float64), op="const")


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value: np.ndarray, parents: Sequence[Node], op: str, rule: Callable[[np.ndarray], None]) -> Node:
    out = Node(value, parents, op)
    if out.requires_grad:
        out._backward = rule
    return out


# === elementwise ===

def add(a: Node, b) -> Node:
    if isinstance(b, Real):
        return _make(a.value + b, (a,), "add", lambda g: a._accumulate(g))
    b = _as_node(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def rule(g):
        a._accumulate(g)
        b._accumulate(g)

    return _make(a.value + b.value, (a, b), "add", rule)


def neg(a: Node) -> Node:
    return _make(-a.value, (a,), "neg", lambda g: a._accumulate(-g))


def _channel_broadcast(big: tuple, small: tuple) -> bool:
    return len(big) == 4 and len(small) == 4 and small[1] == 1 and big[:1] + big[2:] == small[:1] + small[2:]


def mul(a: Node, b) -> Node:
    if isinstance(b, Real):
        return _make(a.value * b, (a,), "mul", lambda g: a._accumulate(g * b))
    b = _as_node(b)
    if a.shape != b.shape and not (_channel_broadcast(a.shape, b.shape) or _channel_broadcast(b.shape, a.shape)):
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def rule(g):
        a._accumulate(_reduce_to(g * b.value, a.shape))
        b._accumulate(_reduce_to(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), "mul", rule)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=1, keepdims=True)


def log(a: Node) -> Node:
    return _make(np.log(a.value), (a,), "log", lambda g: a._accumulate(g / a.value))


def exp(a: Node) -> Node:
    value = np.exp(a.value)
    return _make(value, (a,), "exp", lambda g: a._accumulate(g * value))


def relu(a: Node) -> Node:
    active = a.value > 0
    return _make(np.where(active, a.value, 0.0), (a,), "relu", lambda g: a._accumulate(g * active))


def clip(a: Node, lo: float, hi: float) -> Node:
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), "clip", lambda g: a._accumulate(g * inside))


def scaled_sigmoid(a: Node, omega: float, sigma: float) -> Node:
    """1 / (1 + exp(-omega * (a - sigma)))."""
    value = 0.5 * (1.0 + np.tanh(0.5 * omega * (a.value - sigma)))
    return _make(value, (a,), "scaled_sigmoid", lambda g: a._accumulate(g * omega * value * (1.0 - value)))


# === reductions and reshaping ===

def _axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axis = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(ax % ndim for ax in axis))


def reduce_sum(a: Node, axis=None) -> Node:
    axes = _axes(axis, a.ndim)

    def rule(g):
        a._accumulate(np.broadcast_to(np.expand_dims(g, axes), a.shape))

    return _make(a.value.sum(axis=axes), (a,), "sum", rule)


def reduce_mean(a: Node, axis=None) -> Node:
    axes = _axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    return mul(reduce_sum(a, axes), 1.0 / count)


def reshape(a: Node, shape: tuple[int, ...]) -> Node:
    return _make(a.value.reshape(shape), (a,), "reshape", lambda g: a._accumulate(g.reshape(a.shape)))


def softmax(a: Node) -> Node:
    """Softmax over the last axis."""
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        a._accumulate(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(s, (a,), "softmax", rule)


def topk_mean(a: Node, k: int, largest: bool = True) -> Node:
    """
    Mean of the k largest (or smallest) entries along the last axis.

    Ties are broken by the lowest flat index; unselected entries get zero gradient.
    """
    n = a.shape[-1]
    if k < 1 or k > n:
        raise ValueError(f"topk_mean: k={k} outside [1, {n}]")
    keys = -a.value if largest else a.value
    order = np.argsort(keys, axis=-1, kind="stable")[..., :k]
    selected = np.take_along_axis(a.value, order, axis=-1)

    def rule(g):
        dx = np.zeros_like(a.value)
        np.put_along_axis(dx, order, np.broadcast_to(g[..., None] / k, order.shape), axis=-1)
        a._accumulate(dx)

    return _make(selected.mean(axis=-1), (a,), "topk" if largest else "bottomk", rule)


# === linear algebra ===

def matmul(a: Node, b: Node) -> Node:
    b = _as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def rule(g):
        a._accumulate(g @ b.value.T)
        b._accumulate(a.value.T @ g)

    return _make(a.value @ b.value, (a, b), "matmul", rule)


def _correlate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-padded, stride-1 cross-correlation of (N,C,H,W) with (F,C,k,k)."""
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    return np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def conv2d(x: Node, w: Node, b: Node | None = None) -> Node:
    """Stride-1 convolution with zero 'same' padding; odd square kernels only."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects (N,C,H,W) input and (F,C,k,k) kernel, got {x.shape} and {w.shape}")
    f, c, kh, kw = w.shape
    if x.shape[1] != c or kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel {w.shape} incompatible with input {x.shape}")
    if b is not None and b.shape != (f,):
        raise ValueError(f"conv2d: bias shape {b.shape} does not match {f} filters")
    out = _correlate(x.value, w.value)
    if b is not None:
        out = out + b.value[None, :, None, None]
    p = kh // 2

    def rule(g):
        if x.requires_grad:
            flipped = w.value[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            x._accumulate(_correlate(g, flipped))
        if w.requires_grad:
            xp = np.pad(x.value, ((0, 0), (0, 0), (p, p), (p, p)))
            windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
            w._accumulate(np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])))
        if b is not None:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, "conv2d", rule)


def avg_pool2(x: Node) -> Node:
    """2x2 mean pooling with stride 2 over the last two axes of (N,C,H,W)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial size, got {h}x{w}")
    value = x.value.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def rule(g):
        x._accumulate(np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0)

    return _make(value, (x,), "avg_pool2", rule)


# === mask plumbing ===

def channel_weighted_sum(maps: Node, weights: Node) -> Node:
    """(N,c,h,w) maps and (N,c) weights -> (N,1,h,w) sum over c of weight * map."""
    if maps.ndim != 4 or weights.shape != maps.shape[:2]:
        raise ValueError(f"channel_weighted_sum: maps {maps.shape} vs weights {weights.shape}")
    value = np.einsum("nchw,nc->nhw", maps.value, weights.value)[:, None]

    def rule(g):
        maps._accumulate(g * weights.value[:, :, None, None])
        weights._accumulate(np.einsum("nchw,nhw->nc", maps.value, g[:, 0]))

    return _make(value, (maps, weights), "channel_weighted_sum", rule)


CONSTANT_RANGE = 1e-12


def minmax_normalize(a: Node) -> Node:
    """
    Min-max normalization of every (h, w) map to [0, 1].

    Maps whose range is below ``CONSTANT_RANGE`` become all-0.5 with zero gradient.
    """
    lead = a.shape[:-2]
    flat = a.value.reshape(lead + (-1,))
    imax = flat.argmax(axis=-1)[..., None]
    imin = flat.argmin(axis=-1)[..., None]
    hi = np.take_along_axis(flat, imax, axis=-1)
    lo = np.take_along_axis(flat, imin, axis=-1)
    span = hi - lo
    flat_const = span < CONSTANT_RANGE
    safe = np.where(flat_const, 1.0, span)
    y = np.where(flat_const, 0.5, (flat - lo) / safe)

    def rule(g):
        gf = g.reshape(flat.shape)
        dx = gf / safe
        g_hi = -(gf * y).sum(axis=-1, keepdims=True) / safe
        g_lo = (gf * (y - 1.0)).sum(axis=-1, keepdims=True) / safe
        np.put_along_axis(dx, imax, np.take_along_axis(dx, imax, axis=-1) + g_hi, axis=-1)
        np.put_along_axis(dx, imin, np.take_along_axis(dx, imin, axis=-1) + g_lo, axis=-1)
        dx = np.where(flat_const, 0.0, dx)
        a._accumulate(dx.reshape(a.shape))

    return _make(y.reshape(a.shape), (a,), "minmax_normalize", rule)


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape (n_out, n_in)."""
    weights = np.zeros((n_out, n_in))
    if n_in == 1:
        weights[:, 0] = 1.0
        return weights
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - i0
    rows = np.arange(n_out)
    weights[rows, i0] = 1.0 - frac
    weights[rows, i0 + 1] += frac
    return weights


def upsample_bilinear(a: Node, height: int, width: int) -> Node:
    h, w = a.shape[-2:]
    if height < h or width < w:
        raise ValueError(f"upsample_bilinear: target {height}x{width} smaller than source {h}x{w}")
    ry = interpolation_matrix(h, height)
    rx = interpolation_matrix(w, width)

    def rule(g):
        a._accumulate(ry.T @ g @ rx)

    return _make(ry @ a.value @ rx.T, (a,), "upsample_bilinear", rule)


# === driver ===

def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Fill ``grad`` on every node reachable from ``root`` with d(root)/d(node)."""
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def numeric_gradient(f: Callable[[Node], Node], x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of a scalar graph builder, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        grad.flat[i] = (f(constant(xp)).item() - f(constant(xm)).item()) / (2.0 * h)
    return grad


def analytic_gradient(f: Callable[[Node], Node], x: np.ndarray) -> np.ndarray:
    var = variable(x)
    backward(f(var))
    return var.grad if var.grad is not None else np.zeros_like(var.value)


def finite_diff_check(f: Callable[[Node], Node], x: np.ndarray, h: float = 1e-6, floor: float = 1e-8) -> float:
    """
    Max componentwise relative error between ``backward`` and central differences.

    The error of one component is |a - n| / max(|a|, |n|, floor).
    """
    analytic = analytic_gradient(f, x)
    numeric = numeric_gradient(f, x, h)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / scale).max())
