"""Small dense reverse-mode autodiff over numpy float64 arrays.

A :class:`Graph` is built once with explicit leaves (``param``, ``input``,
``const``) and a fixed vocabulary of ops, then evaluated against bindings::

    g = Graph()
    x = g.input("x", (3,))
    w = g.param("w", (3,))
    y = g.sum(x * w)
    grads = backprop(g, {"x": np.ones(3), "w": np.arange(3.0)})

Hidden layers use the tanh-approximated GELU throughout the package.
Broadcasting is limited to bias-add (``add`` with a 1-D right operand) and
``scale`` by a Python float; everything else needs matching shapes, with
``expand`` as the explicit broadcast.
"""
from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Divergence",
    "Node",
    "Graph",
    "evaluate",
    "backprop",
    "value_and_grad",
    "finite_diff_check",
    "AdamState",
    "adam_init",
    "adam_step",
    "dumps_params",
    "loads_params",
    "save_params",
    "load_params",
    "fault_injection",
    "op_gradcheck_suite",
    "OP_KINDS",
]


class ShapeError(ValueError):
    """Raised when an op receives operands it cannot combine."""


class Divergence(FloatingPointError):
    """A training loss became non-finite."""

    def __init__(self, step: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at step {step}")
        self.step = step
        self.value = value


_LEAVES = ("param", "input", "const")


@dataclass(eq=False)
class Node:
    graph: "Graph"
    id: int
    kind: str
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)
    name: str = ""
    shape: tuple | None = None  # declared shape, leaves only

    def __add__(self, other):
        return self.graph.add(self, other)

    def __sub__(self, other):
        return self.graph.add(self, self.graph.scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.scale(self, float(other))
        return self.graph.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __repr__(self):
        return f"Node({self.id}, {self.kind}, name={self.name!r})"


class Graph:
    """Topologically ordered op records plus named leaf tensors."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: dict[str, Node] = {}
        self.inputs: dict[str, Node] = {}
        self._names: set[str] = set()
        self._grad_mask: list[bool] | None = None

    # -- leaves ---------------------------------------------------------
    def _leaf(self, kind, name, shape=None, value=None):
        if name in self._names:
            raise ValueError(f"duplicate node name {name!r}")
        node = Node(self, len(self.nodes), kind, (), {}, name,
                    None if shape is None else tuple(shape))
        if kind == "const":
            node.attrs["value"] = np.asarray(value, dtype=np.float64)
        self.nodes.append(node)
        self._names.add(name)
        self._grad_mask = None
        return node

    def param(self, name: str, shape: Sequence[int] | None = None) -> Node:
        node = self._leaf("param", name, shape)
        self.parameters[name] = node
        return node

    def input(self, name: str, shape: Sequence[int] | None = None) -> Node:
        node = self._leaf("input", name, shape)
        self.inputs[name] = node
        return node

    def const(self, value, name: str | None = None) -> Node:
        return self._leaf("const", name or f"const_{len(self.nodes)}", value=value)

    # -- ops ------------------------------------------------------------
    def op(self, kind: str, *inputs: Node, name: str | None = None, **attrs) -> Node:
        if kind not in _FORWARD:
            raise ValueError(f"unknown op kind {kind!r}")
        for x in inputs:
            if not isinstance(x, Node) or x.graph is not self:
                raise TypeError(f"{kind}: operands must be nodes of this graph")
        name = name or f"{kind}_{len(self.nodes)}"
        if name in self._names:
            raise ValueError(f"duplicate node name {name!r}")
        node = Node(self, len(self.nodes), kind, tuple(inputs), attrs, name)
        self.nodes.append(node)
        self._names.add(name)
        self._grad_mask = None
        return node

    def matmul(self, a, b, name=None):
        return self.op("matmul", a, b, name=name)

    def add(self, a, b, name=None):
        return self.op("add", a, b, name=name)

    def mul(self, a, b, name=None):
        return self.op("mul", a, b, name=name)

    def scale(self, a, c: float, name=None):
        return self.op("scale", a, c=float(c), name=name)

    def concat(self, xs: Sequence[Node], axis: int = -1, name=None):
        return self.op("concat", *xs, axis=axis, name=name)

    def slice(self, a, axis: int, start: int, stop: int, name=None):
        return self.op("slice", a, axis=axis, start=start, stop=stop, name=name)

    def transpose(self, a, name=None):
        return self.op("transpose", a, name=name)

    def reshape(self, a, shape: Sequence[int], name=None):
        return self.op("reshape", a, shape=tuple(shape), name=name)

    def expand(self, a, axis: int, n: int, name=None):
        return self.op("expand", a, axis=axis, n=int(n), name=name)

    def sigmoid(self, a, name=None):
        return self.op("sigmoid", a, name=name)

    def tanh(self, a, name=None):
        return self.op("tanh", a, name=name)

    def gelu(self, a, name=None):
        return self.op("gelu", a, name=name)

    def softplus(self, a, name=None):
        return self.op("softplus", a, name=name)

    def softmax(self, a, axis: int = -1, name=None):
        return self.op("softmax", a, axis=axis, name=name)

    def mean(self, a, axis: int | None = None, keepdims: bool = False, name=None):
        return self.op("mean", a, axis=axis, keepdims=keepdims, name=name)

    def sum(self, a, axis: int | None = None, keepdims: bool = False, name=None):
        return self.op("sum", a, axis=axis, keepdims=keepdims, name=name)

    def max(self, a, axis: int, keepdims: bool = True, name=None):
        return self.op("max", a, axis=axis, keepdims=keepdims, name=name)

    def mse(self, a, b, name=None):
        return self.op("mse", a, b, name=name)

    def layernorm(self, x, gamma, beta, eps: float = 1e-5, name=None):
        return self.op("layernorm", x, gamma, beta, eps=eps, name=name)

    def norm(self, a, name=None):
        return self.op("norm", a, name=name)

    def reciprocal(self, a, name=None):
        return self.op("reciprocal", a, name=name)

    def clamp_min(self, a, c: float, name=None):
        return self.op("clamp_min", a, c=float(c), name=name)

    def step(self, a, name=None):
        return self.op("step", a, name=name)

    def sixd_to_matrix(self, a, name=None):
        return self.op("sixd_to_matrix", a, name=name)

    def matrix_to_quat(self, a, name=None):
        return self.op("matrix_to_quat", a, name=name)

    # -- bookkeeping ----------------------------------------------------
    def grad_mask(self) -> list[bool]:
        """Per node: does its value depend on any parameter."""
        if self._grad_mask is None:
            mask = []
            for node in self.nodes:
                if node.kind == "param":
                    mask.append(True)
                elif node.kind in _LEAVES or node.kind == "step":
                    mask.append(False)
                else:
                    mask.append(any(mask[x.id] for x in node.inputs))
            self._grad_mask = mask
        return self._grad_mask

    def __len__(self):
        return len(self.nodes)


# ---------------------------------------------------------------------------
# forward rules

def _fail(node, msg, *shapes):
    detail = ", ".join(str(tuple(s)) for s in shapes)
    raise ShapeError(f"op {node.id} ({node.kind}, {node.name!r}): {msg}; got {detail}")


def _f_matmul(node, a, b):
    if a.ndim < 2 or b.ndim < 2:
        _fail(node, "matmul needs operands of rank >= 2", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        _fail(node, "inner dimensions differ", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        _fail(node, "batched matmul needs equal leading dimensions", a.shape, b.shape)
    return a @ b


def _f_add(node, a, b):
    if a.shape != b.shape and not (b.ndim == 1 and a.shape[-1:] == b.shape):
        _fail(node, "add needs equal shapes or a trailing 1-D bias", a.shape, b.shape)
    return a + b


def _f_mul(node, a, b):
    if a.shape != b.shape:
        _fail(node, "elementwise mul needs equal shapes", a.shape, b.shape)
    return a * b


def _f_concat(node, *xs):
    axis = node.attrs["axis"]
    ref = xs[0]
    ax = axis % ref.ndim
    for x in xs[1:]:
        if x.ndim != ref.ndim or x.shape[:ax] + x.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            _fail(node, f"concat along axis {axis} needs matching other dims", *(y.shape for y in xs))
    return np.concatenate(xs, axis=axis)


def _f_slice(node, a):
    axis, start, stop = node.attrs["axis"], node.attrs["start"], node.attrs["stop"]
    if not 0 <= start < stop <= a.shape[axis]:
        _fail(node, f"slice [{start}:{stop}) out of range on axis {axis}", a.shape)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return a[tuple(idx)]


def _f_transpose(node, a):
    if a.ndim < 2:
        _fail(node, "transpose needs rank >= 2", a.shape)
    return np.swapaxes(a, -1, -2)


def _f_reshape(node, a):
    shape = node.attrs["shape"]
    if math.prod(shape) != a.size:
        _fail(node, f"cannot reshape to {shape}", a.shape)
    return a.reshape(shape)


def _f_expand(node, a):
    axis, n = node.attrs["axis"], node.attrs["n"]
    if a.shape[axis] != 1:
        _fail(node, f"expand needs size 1 on axis {axis}", a.shape)
    return np.repeat(a, n, axis=axis)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_GELU_K = math.sqrt(2.0 / math.pi)


def _f_gelu(node, x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_K * (x + 0.044715 * x ** 3)))


def _f_softmax(node, a):
    axis = node.attrs["axis"]
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _f_mse(node, a, b):
    if a.shape != b.shape:
        _fail(node, "mse needs equal shapes", a.shape, b.shape)
    return np.asarray(np.mean((a - b) ** 2))


def _f_layernorm(node, x, gamma, beta):
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        _fail(node, "layernorm gain/bias must match the last axis", x.shape, gamma.shape, beta.shape)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + node.attrs["eps"])
    return xhat * gamma + beta


def _f_sixd(node, a):
    if a.shape[-1] != 6:
        _fail(node, "sixd_to_matrix needs a trailing axis of 6", a.shape)
    return _gram_schmidt(a)[0]


def _f_m2q(node, a):
    if a.shape[-2:] != (3, 3):
        _fail(node, "matrix_to_quat needs trailing 3x3", a.shape)
    return quat_from_matrix_core(a)[0]


_FORWARD: dict[str, Callable] = {
    "matmul": _f_matmul,
    "add": _f_add,
    "mul": _f_mul,
    "scale": lambda n, a: a * n.attrs["c"],
    "concat": _f_concat,
    "slice": _f_slice,
    "transpose": _f_transpose,
    "reshape": _f_reshape,
    "expand": _f_expand,
    "sigmoid": lambda n, a: _sigmoid(a),
    "tanh": lambda n, a: np.tanh(a),
    "gelu": _f_gelu,
    "softplus": lambda n, a: np.logaddexp(0.0, a),
    "softmax": _f_softmax,
    "mean": lambda n, a: np.asarray(a.mean(axis=n.attrs["axis"], keepdims=n.attrs["keepdims"])),
    "sum": lambda n, a: np.asarray(a.sum(axis=n.attrs["axis"], keepdims=n.attrs["keepdims"])),
    "max": lambda n, a: a.max(axis=n.attrs["axis"], keepdims=n.attrs["keepdims"]),
    "mse": _f_mse,
    "layernorm": _f_layernorm,
    "norm": lambda n, a: np.sqrt(np.sum(a * a, axis=-1)),
    "reciprocal": lambda n, a: 1.0 / a,
    "clamp_min": lambda n, a: np.maximum(a, n.attrs["c"]),
    "step": lambda n, a: (a > 0).astype(np.float64),
    "sixd_to_matrix": _f_sixd,
    "matrix_to_quat": _f_m2q,
}

OP_KINDS = tuple(_FORWARD)


# ---------------------------------------------------------------------------
# rotation kernels shared with pamd.rotor

def _cross(a, b):
    return np.stack([
        a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
        a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
        a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
    ], axis=-1)


def _dot(a, b):
    return (a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2])[..., None]


def _gram_schmidt(six):
    """6D (first two matrix columns) -> rotation matrix plus saved terms."""
    a, b = six[..., :3], six[..., 3:]
    na = np.sqrt(_dot(a, a))
    a1 = a / na
    d = _dot(a1, b)
    bp = b - d * a1
    nb = np.sqrt(_dot(bp, bp))
    b1 = bp / nb
    c = _cross(a1, b1)
    mat = np.stack([a1, b1, c], axis=-1)
    return mat, (b, na, a1, d, nb, b1)


def _gram_schmidt_vjp(g, saved):
    b, na, a1, d, nb, b1 = saved
    ga1 = g[..., :, 0] + _cross(b1, g[..., :, 2])
    gb1 = g[..., :, 1] + _cross(g[..., :, 2], a1)
    gbp = (gb1 - b1 * _dot(b1, gb1)) / nb
    pa = _dot(gbp, a1)
    gb = gbp - pa * a1
    ga1 = ga1 - pa * b - d * gbp
    ga = (ga1 - a1 * _dot(a1, ga1)) / na
    return np.concatenate([ga, gb], axis=-1)


def _coef(entries):
    m = np.zeros((3, 3))
    for (i, j), v in entries.items():
        m[i, j] = v
    return m


# Shepperd's method: branch c picks the largest of (trace, R00, R11, R22).
# s^2 = 1 + <_DIAG[c], R>; component c = s/2, component j = <_NUM[c][j], R> / (2s).
_DIAG = np.array([
    _coef({(0, 0): 1, (1, 1): 1, (2, 2): 1}),
    _coef({(0, 0): 1, (1, 1): -1, (2, 2): -1}),
    _coef({(0, 0): -1, (1, 1): 1, (2, 2): -1}),
    _coef({(0, 0): -1, (1, 1): -1, (2, 2): 1}),
])
_W = _coef({(2, 1): 1, (1, 2): -1})
_Xs = _coef({(0, 1): 1, (1, 0): 1})
_Ys = _coef({(0, 2): 1, (2, 0): 1})
_Zs = _coef({(1, 2): 1, (2, 1): 1})
_NUM = np.array([
    [np.zeros((3, 3)), _W, _coef({(0, 2): 1, (2, 0): -1}), _coef({(1, 0): 1, (0, 1): -1})],
    [_W, np.zeros((3, 3)), _Xs, _Ys],
    [_coef({(0, 2): 1, (2, 0): -1}), _Xs, np.zeros((3, 3)), _Zs],
    [_coef({(1, 0): 1, (0, 1): -1}), _Ys, _Zs, np.zeros((3, 3))],
])


def quat_from_matrix_core(mat):
    """Canonical (w >= 0) quaternion (w, x, y, z) from rotation matrices.

    Returns ``(quat, saved)`` where ``saved`` feeds the backward rule.
    """
    lead = mat.shape[:-2]
    m = mat.reshape(-1, 3, 3)
    diag = np.stack([m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2], m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=-1)
    branch = np.argmax(diag, axis=-1)
    s2 = 1.0 + np.einsum("nij,nij->n", _DIAG[branch], m)
    s = np.sqrt(np.maximum(s2, 1e-300))
    num = np.einsum("nkij,nij->nk", _NUM[branch], m)
    q = num / (2.0 * s[:, None])
    rows = np.arange(len(m))
    q[rows, branch] = 0.5 * s
    sign = np.where(q[:, 0] < 0, -1.0, 1.0)
    tie = q[:, 0] == 0
    if tie.any():
        # w == 0: make the first non-zero vector component positive
        v = q[tie, 1:]
        first = v[np.arange(len(v)), np.argmax(v != 0, axis=-1)]
        sign[tie] = np.where(first < 0, -1.0, 1.0)
    q = q * sign[:, None]
    return q.reshape(lead + (4,)), (m, branch, s, num, sign)


def _m2q_vjp(g, saved, lead):
    m, branch, s, num, sign = saved
    gq = g.reshape(-1, 4) * sign[:, None]
    rows = np.arange(len(m))
    onehot = np.zeros_like(gq)
    onehot[rows, branch] = 1.0
    other = gq * (1.0 - onehot)
    gc = gq[rows, branch]
    coef_s = 0.5 * gc - np.sum(other * num, axis=-1) / (2.0 * s * s)
    grad = coef_s[:, None, None] * _DIAG[branch] / (2.0 * s)[:, None, None]
    grad += np.einsum("nk,nkij->nij", other, _NUM[branch]) / (2.0 * s)[:, None, None]
    return grad.reshape(lead + (3, 3))


# ---------------------------------------------------------------------------
# backward rules: (node, g, input values, output value) -> grads per input

def _unbias(g, b):
    return g.reshape(-1, b.shape[0]).sum(axis=0)


def _b_matmul(node, g, vals, out):
    a, b = vals
    ga = g @ np.swapaxes(b, -1, -2)
    if b.ndim == 2:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.swapaxes(a, -1, -2) @ g
    return ga, gb


def _b_add(node, g, vals, out):
    a, b = vals
    return g, (g if a.shape == b.shape else _unbias(g, b))


def _b_concat(node, g, vals, out):
    axis = node.attrs["axis"]
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _b_slice(node, g, vals, out):
    (a,) = vals
    full = np.zeros_like(a)
    idx = [slice(None)] * a.ndim
    idx[node.attrs["axis"]] = slice(node.attrs["start"], node.attrs["stop"])
    full[tuple(idx)] = g
    return (full,)


def _b_gelu(node, g, vals, out):
    (x,) = vals
    inner = _GELU_K * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * x * x)
    return (g * d,)


def _b_softmax(node, g, vals, out):
    axis = node.attrs["axis"]
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


def _b_reduce(node, g, vals, out, scale):
    (a,) = vals
    axis = node.attrs["axis"]
    if axis is not None and not node.attrs["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g * scale, a.shape).copy(),)


def _b_mean(node, g, vals, out):
    (a,) = vals
    axis = node.attrs["axis"]
    count = a.size if axis is None else a.shape[axis]
    return _b_reduce(node, g, vals, out, 1.0 / count)


def _b_max(node, g, vals, out):
    (a,) = vals
    axis = node.attrs["axis"]
    if not node.attrs["keepdims"]:
        g = np.expand_dims(g, axis)
    first = np.expand_dims(np.argmax(a, axis=axis), axis)
    ga = np.zeros_like(a)
    np.put_along_axis(ga, first, g, axis=axis)
    return (ga,)


def _b_mse(node, g, vals, out):
    a, b = vals
    d = (2.0 / a.size) * (a - b) * g
    return d, -d


def _b_layernorm(node, g, vals, out):
    x, gamma, beta = vals
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + node.attrs["eps"])
    xhat = (x - mu) * inv
    gxhat = g * gamma
    gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
    return gx, _unbias(g * xhat, gamma), _unbias(g, beta)


def _b_norm(node, g, vals, out):
    (a,) = vals
    safe = np.where(out > 0, out, 1.0)
    unit = np.where((out > 0)[..., None], a / safe[..., None], 0.0)
    return (g[..., None] * unit,)


def _b_sixd(node, g, vals, out):
    _, saved = _gram_schmidt(vals[0])
    return (_gram_schmidt_vjp(g, saved),)


def _b_m2q(node, g, vals, out):
    a = vals[0]
    _, saved = quat_from_matrix_core(a)
    return (_m2q_vjp(g, saved, a.shape[:-2]),)


_BACKWARD: dict[str, Callable] = {
    "matmul": _b_matmul,
    "add": _b_add,
    "mul": lambda n, g, v, o: (g * v[1], g * v[0]),
    "scale": lambda n, g, v, o: (g * n.attrs["c"],),
    "concat": _b_concat,
    "slice": _b_slice,
    "transpose": lambda n, g, v, o: (np.swapaxes(g, -1, -2),),
    "reshape": lambda n, g, v, o: (g.reshape(v[0].shape),),
    "expand": lambda n, g, v, o: (g.sum(axis=n.attrs["axis"], keepdims=True),),
    "sigmoid": lambda n, g, v, o: (g * o * (1.0 - o),),
    "tanh": lambda n, g, v, o: (g * (1.0 - o * o),),
    "gelu": _b_gelu,
    "softplus": lambda n, g, v, o: (g * _sigmoid(v[0]),),
    "softmax": _b_softmax,
    "mean": _b_mean,
    "sum": lambda n, g, v, o: _b_reduce(n, g, v, o, 1.0),
    "max": _b_max,
    "mse": _b_mse,
    "layernorm": _b_layernorm,
    "norm": _b_norm,
    "reciprocal": lambda n, g, v, o: (-g * o * o,),
    "clamp_min": lambda n, g, v, o: (g * (v[0] > n.attrs["c"]),),
    "step": lambda n, g, v, o: (np.zeros_like(v[0]),),
    "sixd_to_matrix": _b_sixd,
    "matrix_to_quat": _b_m2q,
}

_FAULTS: dict[str, float] = {}


@contextlib.contextmanager
def fault_injection(kind: str, factor: float = 1.1):
    """Scale the backward rule of ``kind`` by ``factor`` (negative testing)."""
    if kind not in _BACKWARD:
        raise ValueError(f"unknown op kind {kind!r}")
    _FAULTS[kind] = factor
    try:
        yield
    finally:
        _FAULTS.pop(kind, None)


# ---------------------------------------------------------------------------
# evaluation

def _forward(graph: Graph, bindings: Mapping[str, np.ndarray]) -> list:
    vals = [None] * len(graph.nodes)
    for node in graph.nodes:
        if node.kind == "const":
            vals[node.id] = node.attrs["value"]
        elif node.kind in ("param", "input"):
            if node.name not in bindings:
                raise KeyError(f"unbound {node.kind} {node.name!r}")
            v = np.asarray(bindings[node.name], dtype=np.float64)
            if node.shape is not None and v.shape != node.shape:
                raise ShapeError(f"{node.kind} {node.name!r}: expected shape {node.shape}, got {v.shape}")
            vals[node.id] = v
        else:
            vals[node.id] = _FORWARD[node.kind](node, *(vals[x.id] for x in node.inputs))
    return vals


def evaluate(graph: Graph, bindings: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Run the graph forward; returns every node's output keyed by node name."""
    vals = _forward(graph, bindings)
    return {node.name: v for node, v in zip(graph.nodes, vals)}


def value_and_grad(graph: Graph, bindings: Mapping[str, np.ndarray], output: Node | None = None,
                   extra: Iterable[Node] = ()):
    """Scalar output value and gradients for every parameter.

    ``extra`` nodes have their forward values returned as a third element
    (useful for logging per-term losses without a second pass).
    """
    out = graph.nodes[-1] if output is None else output
    vals = _forward(graph, bindings)
    y = vals[out.id]
    if y.size != 1:
        raise ShapeError(f"backprop needs a scalar output; node {out.name!r} has shape {y.shape}")
    mask = graph.grad_mask()
    grads: list = [None] * len(graph.nodes)
    grads[out.id] = np.ones_like(y)
    for node in reversed(graph.nodes[: out.id + 1]):
        g = grads[node.id]
        if g is None or node.kind in _LEAVES:
            continue
        ins = [vals[x.id] for x in node.inputs]
        pieces = _BACKWARD[node.kind](node, g, ins, vals[node.id])
        factor = _FAULTS.get(node.kind)
        for x, gx in zip(node.inputs, pieces):
            if not mask[x.id] or gx is None:
                continue
            if factor is not None:
                gx = gx * factor
            grads[x.id] = gx if grads[x.id] is None else grads[x.id] + gx
    result = {}
    for name, node in graph.parameters.items():
        g = grads[node.id]
        result[name] = np.zeros_like(vals[node.id]) if g is None else g
    value = float(y.reshape(()))
    if extra:
        return value, result, {n.name: vals[n.id] for n in extra}
    return value, result


def backprop(graph: Graph, bindings: Mapping[str, np.ndarray], output: Node | None = None) -> dict[str, np.ndarray]:
    """Gradients of the scalar output with respect to every parameter."""
    return value_and_grad(graph, bindings, output)[1]


def finite_diff_check(graph: Graph, bindings: Mapping[str, np.ndarray], eps: float = 1e-5,
                      output: Node | None = None, max_entries: int | None = None,
                      seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    Error per entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    ``max_entries`` caps the number of probed entries per parameter (chosen
    at random with ``seed``); ``None`` probes every entry.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = graph.nodes[-1] if output is None else output
    analytic = backprop(graph, bindings, out)
    rng = np.random.default_rng(seed)
    work = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}
    worst = 0.0
    for name in graph.parameters:
        p = work[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(_forward(graph, work)[out.id].reshape(()))
            flat[i] = orig - eps
            down = float(_forward(graph, work)[out.id].reshape(()))
            flat[i] = orig
            num = (up - down) / (2 * eps)
            ana = float(analytic[name].reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def adam_init(params: Mapping[str, np.ndarray]) -> AdamState:
    return AdamState({k: np.zeros_like(v) for k, v in params.items()},
                     {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float = 4e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0):
    """One Adam update with decoupled weight decay. Returns new (params, state)."""
    step = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeError(f"adam: shape mismatch for {k!r}: param {p.shape}, grad {g.shape}")
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** step)
        vhat = v / (1 - beta2 ** step)
        new_p[k] = p - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, step)


# ---------------------------------------------------------------------------
# checkpoints: {name: {shape, data}} with an optional "__header__" entry

HEADER_KEY = "__header__"


def dumps_params(params: Mapping[str, np.ndarray], header: dict | None = None) -> str:
    doc = {}
    if header is not None:
        doc[HEADER_KEY] = header
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        doc[name] = {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
    return json.dumps(doc)


def loads_params(text: str) -> tuple[dict, dict | None]:
    doc = json.loads(text)
    header = doc.pop(HEADER_KEY, None)
    params = {}
    for name, entry in doc.items():
        try:
            shape = tuple(entry["shape"])
            data = np.asarray(entry["data"], dtype=np.float64)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"checkpoint entry {name!r} is malformed") from exc
        if data.size != math.prod(shape):
            raise ValueError(f"checkpoint entry {name!r}: {data.size} values for shape {shape}")
        params[name] = data.reshape(shape)
    return params, header


def save_params(path, params, header=None):
    with open(path, "w") as fh:
        fh.write(dumps_params(params, header))


def load_params(path):
    with open(path) as fh:
        return loads_params(fh.read())


# ---------------------------------------------------------------------------
# per-op gradient check suite

def _suite_cases(rng):
    """Yield (op kind, graph, bindings) with a random linear read-out."""
    def case(kind, build, shapes, positive=False):
        g = Graph()
        leaves = []
        binds = {}
        for i, s in enumerate(shapes):
            leaves.append(g.param(f"p{i}", s))
            v = rng.normal(size=s)
            binds[f"p{i}"] = np.abs(v) + 0.5 if positive else v
        y = build(g, *leaves)
        probe = rng.normal(size=_forward(g, binds)[y.id].shape)
        r = g.const(probe, "probe")
        if probe.ndim == 0:
            g.mul(y, r)
        else:
            g.sum(g.mul(y, r))
        return kind, g, binds

    m, k, n = (int(x) for x in rng.integers(2, 9, size=3))
    yield case("matmul", lambda g, a, b: g.matmul(a, b), [(m, k), (k, n)])
    yield case("matmul", lambda g, a, b: g.matmul(a, b), [(2, m, k), (2, k, n)])
    yield case("add", lambda g, a, b: g.add(a, b), [(m, n), (m, n)])
    yield case("add", lambda g, a, b: g.add(a, b), [(m, n), (n,)])
    yield case("mul", lambda g, a, b: g.mul(a, b), [(m, n), (m, n)])
    yield case("scale", lambda g, a: g.scale(a, -1.7), [(m, n)])
    yield case("concat", lambda g, a, b: g.concat([a, b], axis=1), [(m, k), (m, n)])
    yield case("slice", lambda g, a: g.slice(a, 1, 1, n), [(m, n)])
    yield case("transpose", lambda g, a: g.transpose(a), [(m, n)])
    yield case("reshape", lambda g, a: g.reshape(a, (n, m)), [(m, n)])
    yield case("expand", lambda g, a: g.expand(a, 1, n), [(m, 1)])
    for kind in ("sigmoid", "tanh", "gelu", "softplus"):
        yield case(kind, lambda g, a, kind=kind: g.op(kind, a), [(m, n)])
    yield case("softmax", lambda g, a: g.softmax(a, axis=-1), [(m, n)])
    yield case("mean", lambda g, a: g.mean(a), [(m, n)])
    yield case("mean", lambda g, a: g.mean(a, axis=0), [(m, n)])
    yield case("sum", lambda g, a: g.sum(a, axis=1, keepdims=True), [(m, n)])
    yield case("max", lambda g, a: g.max(a, axis=0), [(m, n)])
    yield case("mse", lambda g, a, b: g.mse(a, b), [(m, n), (m, n)])
    yield case("layernorm", lambda g, x, ga, be: g.layernorm(x, ga, be), [(m, n), (n,), (n,)])
    yield case("norm", lambda g, a: g.norm(a), [(m, 3)])
    yield case("reciprocal", lambda g, a: g.reciprocal(a), [(m, n)], positive=True)
    yield case("clamp_min", lambda g, a: g.clamp_min(a, 0.0), [(m, n)])
    yield case("sixd_to_matrix", lambda g, a: g.sixd_to_matrix(a), [(m, 6)])
    yield case("matrix_to_quat", lambda g, a: g.matrix_to_quat(g.sixd_to_matrix(a)), [(m, 6)])


def op_gradcheck_suite(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Max relative finite-difference error per op kind on random small shapes."""
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for kind, g, binds in _suite_cases(rng):
        err = finite_diff_check(g, binds, eps)
        report[kind] = max(report.get(kind, 0.0), err)
    # step has zero gradient by definition; check it stays inert
    g = Graph()
    a = g.param("a", (3, 3))
    g.sum(g.mul(g.step(a), a))
    report["step"] = finite_diff_check(g, {"a": rng.normal(size=(3, 3))}, eps)
    return report
