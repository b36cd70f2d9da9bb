"""Small reverse-mode differentiation engine over float64 numpy arrays.

Graphs are built symbolically from :func:`leaf` / :func:`param` nodes and the
op constructors below, evaluated with :func:`forward_eval` against a map of
bindings, and differentiated with :func:`backward_accumulate`.  A graph is
reusable: only the bindings change between batches.

Image tensors use the (N, H, W, C) layout; convolution kernels are stored as
(out_channels, 3, 3, in_channels).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class GraphError(ValueError):
    """Base error for graph construction and evaluation."""


class ShapeError(GraphError):
    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class UnboundLeafError(GraphError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"leaf {name!r} has no binding")


class NonFiniteError(GraphError):
    def __init__(self, what: str):
        self.what = what
        super().__init__(f"non-finite values in {what}")


class Node:
    """One vertex of a computation graph.

    ``value`` and ``grad`` are filled in by :func:`forward_eval` and
    :func:`backward_accumulate`; ``cache`` holds op-specific intermediates.
    """

    __slots__ = ("op", "inputs", "attrs", "name", "trainable", "value", "grad", "cache")

    def __init__(self, op: str, inputs: Sequence["Node"] = (), attrs: dict | None = None,
                 name: str | None = None, trainable: bool = False):
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.name = name
        self.trainable = trainable
        self.value: np.ndarray | None = None
        self.grad: np.ndarray | None = None
        self.cache = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.op}{label}>"


# -- graph construction -------------------------------------------------------

def leaf(name: str) -> Node:
    """Input leaf (data); never receives a returned gradient."""
    return Node("leaf", name=name)


def param(name: str) -> Node:
    """Trainable leaf; :func:`backward_accumulate` returns its gradient."""
    return Node("leaf", name=name, trainable=True)


def affine(x: Node, w: Node, b: Node) -> Node:
    return Node("affine", (x, w, b))


def conv2d(x: Node, w: Node, b: Node, stride: int = 1) -> Node:
    if stride < 1:
        raise GraphError(f"conv2d: stride must be >= 1, got {stride}")
    return Node("conv2d", (x, w, b), {"stride": int(stride)})


def relu(x: Node) -> Node:
    return Node("relu", (x,))


def add(a: Node, b: Node) -> Node:
    return Node("add", (a, b))


def sub(a: Node, b: Node) -> Node:
    return Node("sub", (a, b))


def mul(a: Node, b: Node) -> Node:
    return Node("mul", (a, b))


def square(x: Node) -> Node:
    return Node("square", (x,))


def sum_(x: Node, axis: int | None = None) -> Node:
    return Node("sum", (x,), {"axis": axis})


def mean(x: Node, axis: int | None = None) -> Node:
    return Node("mean", (x,), {"axis": axis})


def reshape(x: Node, shape: Sequence[int]) -> Node:
    return Node("reshape", (x,), {"shape": tuple(int(s) for s in shape)})


def concat(xs: Sequence[Node], axis: int = 0) -> Node:
    if not xs:
        raise GraphError("concat: needs at least one input")
    return Node("concat", tuple(xs), {"axis": int(axis)})


def topo_order(root: Node) -> list[Node]:
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
        for inp in reversed(node.inputs):
            if id(inp) not in seen:
                stack.append((inp, False))
    return order


def leaves(root: Node) -> list[Node]:
    return [n for n in topo_order(root) if n.op == "leaf"]


# -- op kernels ---------------------------------------------------------------
# forward(node, *values) -> value (may set node.cache)
# backward(node, grad, needs) -> tuple of input grads (None where not needed)

def _affine_fwd(node, x, w, b):
    if w.ndim != 2 or b.shape != (w.shape[0],) or x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise ShapeError("affine", x.shape, w.shape, b.shape)
    return x @ w.T + b


def _affine_bwd(node, g, needs):
    x, w, _ = (i.value for i in node.inputs)
    dx = g @ w if needs[0] else None
    if x.ndim == 1:
        dw = np.outer(g, x) if needs[1] else None
        db = g.copy() if needs[2] else None
    else:
        dw = g.T @ x if needs[1] else None
        db = g.sum(axis=0) if needs[2] else None
    return dx, dw, db


def _conv_out_size(n: int, stride: int) -> int:
    # padding 1 on each side, 3x3 window
    return (n + 2 - 3) // stride + 1


def _conv_fwd(node, x, w, b):
    if x.ndim != 4 or w.ndim != 4 or w.shape[1:3] != (3, 3) or w.shape[3] != x.shape[3] \
            or b.shape != (w.shape[0],):
        raise ShapeError("conv2d", x.shape, w.shape, b.shape)
    s = node.attrs["stride"]
    n, h, wd, c = x.shape
    ho, wo = _conv_out_size(h, s), _conv_out_size(wd, s)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, 9 * c)
    node.cache = cols
    out = cols @ w.reshape(w.shape[0], -1).T
    out += b
    return out.reshape(n, ho, wo, w.shape[0])


def _conv_bwd(node, g, needs):
    x, w, _ = (i.value for i in node.inputs)
    s = node.attrs["stride"]
    cols = node.cache
    o = w.shape[0]
    gm = g.reshape(-1, o)
    dw = (gm.T @ cols).reshape(w.shape) if needs[1] else None
    db = np.ones(gm.shape[0]) @ gm if needs[2] else None
    dx = None
    if needs[0]:
        n, h, wd, c = x.shape
        ho, wo = g.shape[1], g.shape[2]
        dcols = (gm @ w.reshape(o, -1)).reshape(n, ho, wo, 3, 3, c)
        dxp = np.zeros((n, h + 2, wd + 2, c), dtype=DTYPE)
        for i in range(3):
            for j in range(3):
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, 1:-1, 1:-1, :]
    return dx, dw, db


def _relu_fwd(node, x):
    node.cache = x > 0
    return np.maximum(x, 0.0)


def _relu_bwd(node, g, needs):
    return (g * node.cache,)


def _check_binary(op, a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(g, shape):
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


def _add_fwd(node, a, b):
    _check_binary("add", a, b)
    return a + b


def _add_bwd(node, g, needs):
    a, b = (i.value for i in node.inputs)
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None)


def _sub_fwd(node, a, b):
    _check_binary("sub", a, b)
    return a - b


def _sub_bwd(node, g, needs):
    a, b = (i.value for i in node.inputs)
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None)


def _mul_fwd(node, a, b):
    _check_binary("mul", a, b)
    return a * b


def _mul_bwd(node, g, needs):
    a, b = (i.value for i in node.inputs)
    return (_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None)


def _square_fwd(node, x):
    return x * x


def _square_bwd(node, g, needs):
    return (2.0 * node.inputs[0].value * g,)


def _axis_ok(op, x, axis):
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise ShapeError(op, x.shape, detail=f"axis {axis}")


def _sum_fwd(node, x):
    _axis_ok("sum", x, node.attrs["axis"])
    return np.asarray(x.sum(axis=node.attrs["axis"]))


def _sum_bwd(node, g, needs):
    x = node.inputs[0].value
    axis = node.attrs["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _mean_fwd(node, x):
    _axis_ok("mean", x, node.attrs["axis"])
    return np.asarray(x.mean(axis=node.attrs["axis"]))


def _mean_bwd(node, g, needs):
    x = node.inputs[0].value
    axis = node.attrs["axis"]
    count = x.size if axis is None else x.shape[axis]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / count, x.shape).copy(),)


def _reshape_fwd(node, x):
    try:
        return x.reshape(node.attrs["shape"])
    except ValueError:
        raise ShapeError("reshape", x.shape, node.attrs["shape"]) from None


def _reshape_bwd(node, g, needs):
    return (g.reshape(node.inputs[0].value.shape),)


def _concat_fwd(node, *xs):
    axis = node.attrs["axis"]
    try:
        return np.concatenate(xs, axis=axis)
    except (ValueError, np.exceptions.AxisError):
        raise ShapeError("concat", *(x.shape for x in xs)) from None


def _concat_bwd(node, g, needs):
    axis = node.attrs["axis"]
    sizes = [i.value.shape[axis] for i in node.inputs]
    parts = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
    return tuple(p if need else None for p, need in zip(parts, needs))


_OPS: dict[str, tuple[Callable, Callable]] = {
    "affine": (_affine_fwd, _affine_bwd),
    "conv2d": (_conv_fwd, _conv_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "square": (_square_fwd, _square_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
    "concat": (_concat_fwd, _concat_bwd),
}


# -- evaluation ---------------------------------------------------------------

def forward_eval(root: Node, bindings: Mapping[str, np.ndarray]) -> np.ndarray:
    """Evaluate ``root``; every intermediate value is cached on its node."""
    for node in topo_order(root):
        if node.op == "leaf":
            if node.name not in bindings:
                raise UnboundLeafError(node.name)
            node.value = np.asarray(bindings[node.name], dtype=DTYPE)
        else:
            fwd = _OPS[node.op][0]
            node.value = fwd(node, *(i.value for i in node.inputs))
    return root.value


def backward_accumulate(root: Node) -> dict[str, np.ndarray]:
    """Gradient of the scalar ``root`` w.r.t. every trainable leaf in its graph.

    Must follow a :func:`forward_eval` of the same graph.
    """
    if root.value is None:
        raise GraphError("backward_accumulate called before forward_eval")
    if root.value.size != 1 or root.value.ndim > 1:
        raise ShapeError("backward", root.value.shape, detail="root must be scalar")
    order = topo_order(root)
    needs_grad: dict[int, bool] = {}
    for node in order:
        node.grad = None
        needs_grad[id(node)] = node.trainable or any(needs_grad[id(i)] for i in node.inputs)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.op == "leaf" or node.grad is None:
            continue
        needs = [needs_grad[id(i)] for i in node.inputs]
        if not any(needs):
            continue
        grads = _OPS[node.op][1](node, node.grad, needs)
        for inp, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            if inp.grad is None:
                inp.grad = np.array(gi, dtype=DTYPE, copy=True)
            else:
                inp.grad += gi
    out = {}
    for node in order:
        if node.op == "leaf" and node.trainable:
            out[node.name] = node.grad if node.grad is not None else np.zeros_like(node.value)
    return out


def value_and_grad(root: Node, bindings: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    val = forward_eval(root, bindings)
    return float(val), backward_accumulate(root)


def is_finite(a: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(a)))


# -- optimizer ------------------------------------------------------------------

@dataclass
class Parameter:
    name: str
    value: np.ndarray
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    step: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(params: Iterable[Parameter], grads: Mapping[str, np.ndarray], lr: float = 1e-3,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> list[Parameter]:
    """One bias-corrected ADAM update, in place."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    params = list(params)
    for p in params:
        if p.name not in grads:
            raise GraphError(f"no gradient for parameter {p.name!r}")
        g = grads[p.name]
        if g.shape != p.value.shape:
            raise ShapeError("adam_step", p.value.shape, g.shape, detail=p.name)
        if not is_finite(g):
            raise NonFiniteError(f"gradient of {p.name!r}")
    for p in params:
        g = grads[p.name]
        p.step += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(p.v / (1.0 - beta2 ** p.step))
        denom += eps
        p.value -= (lr / (1.0 - beta1 ** p.step)) * p.m / denom
    return params


# -- gradient checking ------------------------------------------------------------

def _relu_patterns(root: Node) -> list[np.ndarray]:
    return [n.cache.copy() for n in topo_order(root) if n.op == "relu"]


def finite_diff_check(root: Node, bindings: Mapping[str, np.ndarray], eps: float = 1e-4,
                      max_coords: int = 10_000, seed: int = 0, exclude_kinks: bool = True,
                      names: Iterable[str] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Every trainable coordinate is perturbed, or a random subsample of
    ``max_coords`` when there are more.  With ``exclude_kinks`` a coordinate
    whose perturbation flips any relu sign is skipped.  The relative error is
    ``|a - n| / max(|a|, |n|, floor)`` with ``floor = 1e-6 * max|a|`` so that
    coordinates with negligible gradient are compared on the graph's scale.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    work = {k: np.array(v, dtype=DTYPE, copy=True) for k, v in bindings.items()}
    forward_eval(root, work)
    analytic = backward_accumulate(root)
    if names is not None:
        analytic = {k: analytic[k] for k in names}
    base_patterns = _relu_patterns(root) if exclude_kinks else []

    coords = [(k, i) for k in sorted(analytic) for i in range(analytic[k].size)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in pick]

    def flips() -> bool:
        return any(not np.array_equal(a, b) for a, b in zip(base_patterns, _relu_patterns(root)))

    scale = max((float(np.max(np.abs(g))) for g in analytic.values() if g.size), default=0.0)
    floor = max(1e-6 * scale, 1e-300)
    worst = 0.0
    for name, idx in coords:
        flat = work[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + eps
        fp = float(forward_eval(root, work))
        kink = exclude_kinks and flips()
        flat[idx] = orig - eps
        fm = float(forward_eval(root, work))
        kink = kink or (exclude_kinks and flips())
        flat[idx] = orig
        if kink:
            continue
        num = (fp - fm) / (2.0 * eps)
        a = float(analytic[name].reshape(-1)[idx])
        err = abs(a - num) / max(abs(a), abs(num), floor)
        worst = max(worst, err)
    forward_eval(root, work)
    return worst
