"""Small reverse-mode autodiff engine over float64 numpy tensors of rank <= 2.

Every primitive builds a ``Node`` whose ``_backward`` closure maps the output
adjoint to the adjoints of its parents.  ``Node.backward()`` walks the graph
in reverse topological order and visits each node exactly once.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import NonFinite, ShapeMismatch

_DTYPE = np.float64


class Node:
    """A value in the compute graph together with its accumulated adjoint."""

    __slots__ = ("value", "_grad", "parents", "op", "requires_grad", "_backward")

    def __init__(self, value, parents: tuple["Node", ...] = (), op: str = "leaf",
                 backward: Callable | None = None, requires_grad: bool | None = None):
        self.value = np.asarray(value, dtype=_DTYPE)
        if self.value.ndim > 2:
            raise ShapeMismatch(op, self.value.shape)
        self._grad = None
        self.parents = parents
        self.op = op
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def _accumulate(self, g):
        if self._grad is None:
            self._grad = np.array(g, dtype=_DTYPE).reshape(self.value.shape)
        else:
            self._grad += g

    def backward(self, seed=None):
        """Reverse-mode sweep from this node; seed defaults to 1 for scalars."""
        if seed is None:
            if self.value.size != 1:
                raise ShapeMismatch("backward", self.value.shape)
            seed = np.ones_like(self.value)
        order = _topo_order(self)
        self._accumulate(np.asarray(seed, dtype=_DTYPE))
        for node in reversed(order):
            if node._backward is None or node._grad is None:
                continue
            need = tuple(p.requires_grad for p in node.parents)
            grads = node._backward(node._grad, need)
            for parent, g, n in zip(node.parents, grads, need):
                if n and g is not None:
                    parent._accumulate(g)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    # operator sugar for the handful of places that read better with it
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def param(value) -> Node:
    """Leaf that receives gradients."""
    return Node(np.array(value, dtype=_DTYPE), requires_grad=True)


def const(value) -> Node:
    return Node(value, requires_grad=False)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("add", a, b)

    def backward(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                _unbroadcast(g, b.shape) if need[1] else None)

    return Node(a.value + b.value, (a, b), "add", backward)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("sub", a, b)

    def backward(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                -_unbroadcast(g, b.shape) if need[1] else None)

    return Node(a.value - b.value, (a, b), "sub", backward)


def mul(a, b) -> Node:
    """Elementwise product with broadcasting."""
    a, b = as_node(a), as_node(b)
    _broadcast_shape("mul", a, b)

    def backward(g, need):
        return (_unbroadcast(g * b.value, a.shape) if need[0] else None,
                _unbroadcast(g * a.value, b.shape) if need[1] else None)

    return Node(a.value * b.value, (a, b), "mul", backward)


def scale(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    return Node(a.value * c, (a,), "scale", lambda g, need: (g * c,))


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)

    def backward(g, need):
        return (g @ b.value.T if need[0] else None,
                a.value.T @ g if need[1] else None)

    return Node(a.value @ b.value, (a, b), "matmul", backward)


def transpose(a) -> Node:
    a = as_node(a)
    return Node(a.value.T, (a,), "transpose", lambda g, need: (g.T,))


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat", *(n.shape for n in nodes)) from None
    sizes = [n.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g, need):
        return tuple(np.split(g, cuts, axis=axis))

    return Node(out, tuple(nodes), "concat", backward)


def take_rows(a, index) -> Node:
    """Row selection ``a[index]`` (slice or integer array); rank is preserved."""
    a = as_node(a)
    if a.value.ndim == 0:
        raise ShapeMismatch("take_rows", a.shape)
    if isinstance(index, slice):
        def backward(g, need):
            out = np.zeros_like(a.value)
            out[index] = g
            return (out,)
        return Node(a.value[index], (a,), "slice", backward)

    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.max() >= a.shape[0] or idx.min() < -a.shape[0])):
        raise ShapeMismatch("take_rows", a.shape, idx.shape)

    def backward(g, need):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return Node(a.value[idx], (a,), "slice", backward)


def reshape(a, shape) -> Node:
    a = as_node(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", a.shape, shape) from None
    return Node(out, (a,), "reshape", lambda g, need: (g.reshape(a.shape),))


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001 - mirrors numpy
    a = as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g, need):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Node(out, (a,), "sum", backward)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.shape[axis]
    out = a.value.mean(axis=axis, keepdims=keepdims)

    def backward(g, need):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return Node(out, (a,), "mean", backward)


# ------------------------------------------------------------- nonlinearities

def leaky_relu(a, slope: float = 0.01) -> Node:
    a = as_node(a)
    d = np.where(a.value > 0, 1.0, slope)
    return Node(a.value * d, (a,), "leaky_relu", lambda g, need: (g * d,))


def hinge(a) -> Node:
    """max(a, 0) elementwise."""
    a = as_node(a)
    mask = (a.value > 0).astype(_DTYPE)
    return Node(a.value * mask, (a,), "hinge", lambda g, need: (g * mask,))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Node:
    a = as_node(a)
    y = _sigmoid(np.atleast_1d(a.value)).reshape(a.shape)
    return Node(y, (a,), "sigmoid", lambda g, need: (g * y * (1.0 - y),))


def softmax(a, axis: int = -1, temperature: float = 1.0) -> Node:
    """softmax(temperature * a) along ``axis``."""
    a = as_node(a)
    z = a.value * temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g, need):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (temperature * y * (g - inner),)

    return Node(y, (a,), "softmax", backward)


# ------------------------------------------------------------- normalization

def layer_norm(x, gain, bias, eps: float = 1e-5) -> Node:
    """Normalize each row of ``x`` over its last axis, then ``* gain + bias``."""
    x, gain, bias = as_node(x), as_node(gain), as_node(bias)
    d = x.shape[-1]
    if gain.shape[-1] != d or bias.shape[-1] != d:
        raise ShapeMismatch("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.value + bias.value

    def backward(g, need):
        gx = gg = gb = None
        if need[0]:
            gh = g * gain.value
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if need[1]:
            gg = _unbroadcast(g * xhat, gain.shape)
        if need[2]:
            gb = _unbroadcast(g, bias.shape)
        return gx, gg, gb

    return Node(out, (x, gain, bias), "layer_norm", backward)


def batch_norm(x, gain, bias, eps: float = 1e-5):
    """Train-mode batch norm over axis 0.

    Returns ``(node, batch_mean, batch_var)`` with the biased batch variance,
    so the caller can fold the statistics into running averages.
    """
    x, gain, bias = as_node(x), as_node(gain), as_node(bias)
    if x.value.ndim != 2 or gain.shape[-1] != x.shape[1] or bias.shape[-1] != x.shape[1]:
        raise ShapeMismatch("batch_norm", x.shape, gain.shape, bias.shape)
    mu = x.value.mean(axis=0, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.value + bias.value

    def backward(g, need):
        gx = gg = gb = None
        if need[0]:
            gh = g * gain.value
            gx = inv * (gh - gh.mean(axis=0, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=0, keepdims=True))
        if need[1]:
            gg = _unbroadcast(g * xhat, gain.shape)
        if need[2]:
            gb = _unbroadcast(g, bias.shape)
        return gx, gg, gb

    node = Node(out, (x, gain, bias), "batch_norm", backward)
    return node, mu.ravel(), var.ravel()


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Node:
    """a / max(||a||, eps) along ``axis``; exactly-zero slices map to 0 with 0 gradient."""
    a = as_node(a)
    norm = np.sqrt((a.value * a.value).sum(axis=axis, keepdims=True))
    clamped = norm < eps
    denom = np.where(clamped, eps, norm)
    y = a.value / denom

    def backward(g, need):
        # d(x/|x|) = (g - y <g, y>) / |x|; below eps the denominator is a constant
        proj = (g * y).sum(axis=axis, keepdims=True)
        gx = np.where(clamped, g / eps, (g - y * proj) / denom)
        gx = np.where(norm == 0.0, 0.0, gx)
        return (gx,)

    return Node(y, (a,), "l2_normalize", backward)


def cosine_similarity(a, b, pairwise: bool = True, eps: float = 1e-12) -> Node:
    """Cosine similarity between the rows of ``a`` and ``b``.

    ``pairwise=True`` gives the (rows_a x rows_b) matrix; otherwise ``a`` and
    ``b`` must have the same shape and one value per row is returned.
    """
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch("cosine_similarity", a.shape, b.shape)
    an, bn = l2_normalize(a, -1, eps), l2_normalize(b, -1, eps)
    if pairwise:
        return matmul(an, transpose(bn))
    if a.shape != b.shape:
        raise ShapeMismatch("cosine_similarity", a.shape, b.shape)
    return sum(mul(an, bn), axis=1)


# --------------------------------------------------------------------- losses

def bce_with_targets(p, targets, eps: float = 1e-7) -> Node:
    """Mean binary cross-entropy of probabilities ``p`` against constant 0/1 targets."""
    p = as_node(p)
    t = np.asarray(targets.value if isinstance(targets, Node) else targets, dtype=_DTYPE)
    if t.shape != p.shape:
        raise ShapeMismatch("bce_with_targets", p.shape, t.shape)
    pc = np.clip(p.value, eps, 1.0 - eps)
    inside = (p.value >= eps) & (p.value <= 1.0 - eps)
    n = p.value.size
    loss = -(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc)).mean()

    def backward(g, need):
        d = (-(t / pc) + (1.0 - t) / (1.0 - pc)) / n
        return (g * d * inside,)

    return Node(loss, (p,), "bce", backward)


# --------------------------------------------------------------- gradcheck

def gradient_check(f: Callable[[dict[str, Node]], Node], point: Mapping[str, np.ndarray],
                   h: float = 1e-5) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(1, |g_fd|) with central differences."""
    base = {k: np.array(v, dtype=_DTYPE) for k, v in point.items()}
    nodes = {k: param(v) for k, v in base.items()}
    out = f(nodes)
    if out.value.size != 1 or not np.isfinite(out.value).all():
        raise NonFinite(f"objective value {out.value!r}")
    out.backward()
    worst = 0.0
    for name, x0 in base.items():
        g_ad = nodes[name].grad
        if not np.isfinite(g_ad).all():
            raise NonFinite(f"gradient of {name!r} is not finite")
        flat = x0.reshape(-1)
        for k in range(flat.size):
            saved = flat[k]
            flat[k] = saved + h
            fp = float(f({n: const(v) for n, v in base.items()}).value)
            flat[k] = saved - h
            fm = float(f({n: const(v) for n, v in base.items()}).value)
            flat[k] = saved
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFinite(f"objective not finite near {name}[{k}]")
            g_fd = (fp - fm) / (2.0 * h)
            err = abs(g_ad.reshape(-1)[k] - g_fd) / max(1.0, abs(g_fd))
            worst = max(worst, err)
    return worst
