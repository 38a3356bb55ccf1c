"""Reverse-mode automatic differentiation on an append-only tape.

Every adjoint is itself recorded with the same primitive set, so
:meth:`Tape.grad` can be applied to expressions built from its own
outputs (reverse-over-reverse).  Values are float64 numpy arrays of any
shape; most primitives broadcast like numpy.

Example::

    tape = Tape()
    x = tape.variable(np.array([1.0, 2.0, 3.0]))
    y = inner(x, x)
    (gx,) = tape.grad(y, [x])          # 2 x, recorded on the tape
    (hx,) = tape.grad(inner(gx, gx), [x])   # second order: 8 x
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DiagnosticError, ParameterError, UsageError


class Node:
    """A value on a tape.  Immutable once recorded."""

    __slots__ = ("tape", "id", "kind", "inputs", "attrs", "value", "needs_grad")

    def __init__(self, tape, id, kind, inputs, attrs, value, needs_grad):
        self.tape = tape
        self.id = id
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(id={self.id}, kind={self.kind!r}, shape={self.shape})"

    # Arithmetic sugar; Python scalars and arrays become constants.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(self.tape._lift(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return mul(self, pow_(self.tape._lift(other), -1.0))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        if isinstance(key, slice) and key.step in (None, 1):
            start, stop, _ = key.indices(self.shape[0])
            return slice_(self, 0, start, stop)
        raise TypeError("only unit-step slices along axis 0 are supported")


@dataclass
class Primitive:
    forward: Callable
    vjp: Callable  # (node, g, k) -> Node | None
    name: str = ""


_PRIMS: dict[str, Primitive] = {}


def _primitive(name):
    def deco(cls):
        _PRIMS[name] = Primitive(cls.forward, cls.vjp, name)
        return cls

    return deco


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.closed = False

    def __len__(self):
        return len(self.nodes)

    def _append(self, kind, inputs, attrs, value, needs_grad):
        if self.closed:
            raise UsageError("tape is closed")
        node = Node(self, len(self.nodes), kind, tuple(inputs), attrs, value, needs_grad)
        self.nodes.append(node)
        return node

    def release(self):
        """Close the tape and drop its nodes.

        Nodes point back at their tape, so a finished tape is otherwise
        only reclaimed by the cyclic garbage collector.
        """
        self.closed = True
        self.nodes = []

    def variable(self, value, name=None) -> Node:
        """A differentiable leaf."""
        v = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ParameterError(f"non-finite leaf value{'' if name is None else ' for ' + name}")
        return self._append("variable", (), {"name": name}, v, True)

    def constant(self, value) -> Node:
        """A non-differentiable leaf."""
        return self._append("constant", (), {}, np.asarray(value, dtype=np.float64), False)

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise UsageError("node belongs to a different tape")
            return x
        return self.constant(x)

    def record(self, kind: str, inputs: Sequence, **attrs) -> Node:
        """Apply primitive ``kind`` to ``inputs`` and append the result."""
        if kind in _ALIASES:
            return _ALIASES[kind](*inputs, **attrs)
        prim = _PRIMS.get(kind)
        if prim is None:
            raise ParameterError(f"unknown primitive {kind!r}")
        nodes = [self._lift(x) for x in inputs]
        try:
            value = prim.forward([n.value for n in nodes], **attrs)
        except ValueError as exc:
            raise ParameterError(f"{kind}: {exc}") from exc
        value = np.asarray(value, dtype=np.float64)
        return self._append(kind, [n.id for n in nodes], attrs, value, any(n.needs_grad for n in nodes))

    def replay(self) -> list[np.ndarray]:
        """Recompute every value from the leaves."""
        values: list[np.ndarray] = []
        for n in self.nodes:
            if n.kind in ("variable", "constant"):
                values.append(n.value)
            else:
                values.append(
                    np.asarray(_PRIMS[n.kind].forward([values[i] for i in n.inputs], **n.attrs))
                )
        return values

    def grad(self, output: Node, wrt: Sequence[Node]) -> list[Node]:
        """Adjoints of scalar ``output`` w.r.t. each node in ``wrt``.

        The adjoints are recorded on this tape, so they may themselves be
        differentiated.  Nodes that ``output`` does not depend on get a
        zero constant.
        """
        output = self._lift(output)
        if output.value.size != 1:
            raise ParameterError(f"grad needs a scalar output, got shape {output.shape}")
        wrt = [self._lift(w) for w in wrt]
        nodes = self.nodes
        stop = output.id + 1
        # descendants of wrt ...
        live = bytearray(stop)
        for w in wrt:
            if w.id < stop:
                live[w.id] = 1
        lo = min((w.id for w in wrt), default=stop)
        for n in nodes[lo:stop]:
            if not live[n.id] and any(live[i] for i in n.inputs):
                live[n.id] = 1
        # ... that are also ancestors of output
        need = bytearray(stop)
        need[output.id] = live[output.id]
        for n in reversed(nodes[lo:stop]):
            if need[n.id]:
                for i in n.inputs:
                    if live[i]:
                        need[i] = 1
        adj: dict[int, Node] = {}
        if need[output.id]:
            adj[output.id] = self.constant(np.ones_like(output.value))
        for idx in range(output.id, lo - 1, -1):
            g = adj.get(idx)
            if g is None or not need[idx]:
                continue
            n = nodes[idx]
            if not n.inputs:
                continue
            prim = _PRIMS[n.kind]
            for k, i in enumerate(n.inputs):
                if not need[i]:
                    continue
                contrib = prim.vjp(n, g, k)
                adj[i] = add(adj[i], contrib) if i in adj else contrib
        out = []
        for w in wrt:
            a = adj.get(w.id)
            out.append(a if a is not None else self.constant(np.zeros_like(w.value)))
        return out


def _tape_of(*xs) -> Tape:
    tapes = {x.tape for x in xs if isinstance(x, Node)}
    if not tapes:
        raise UsageError("at least one argument must be a Node")
    if len(tapes) > 1:
        raise UsageError("inputs live on different tapes")
    return tapes.pop()


def _rec(kind, *inputs, **attrs) -> Node:
    return _tape_of(*inputs).record(kind, inputs, **attrs)


def _in(node, k) -> Node:
    return node.tape.nodes[node.inputs[k]]


def _unbroadcast_shape(g: Node, shape) -> Node:
    if g.shape == tuple(shape):
        return g
    return _rec("sum_to", g, shape=tuple(shape))


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


@_primitive("add")
class _Add:
    @staticmethod
    def forward(v):
        return v[0] + v[1]

    @staticmethod
    def vjp(node, g, k):
        return _unbroadcast_shape(g, _in(node, k).shape)


@_primitive("mul")
class _Mul:
    @staticmethod
    def forward(v):
        return v[0] * v[1]

    @staticmethod
    def vjp(node, g, k):
        other = _in(node, 1 - k)
        return _unbroadcast_shape(mul(g, other), _in(node, k).shape)


@_primitive("scale")
class _Scale:
    @staticmethod
    def forward(v, c):
        return v[0] * c

    @staticmethod
    def vjp(node, g, k):
        return scale(g, node.attrs["c"])


def _einsum_parse(subscripts, n_ops):
    lhs, out = subscripts.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != n_ops:
        raise ParameterError(f"einsum '{subscripts}' expects {len(ins)} operands, got {n_ops}")
    for k, s in enumerate(ins):
        if len(set(s)) != len(s):
            raise ParameterError(f"einsum operand {k} repeats an index: '{s}'")
        others = set(out).union(*(set(t) for j, t in enumerate(ins) if j != k))
        if not set(s) <= others:
            raise ParameterError(f"einsum operand {k} has an index summed only over itself")
    return ins, out


def _einsum2(subscripts, a, b):
    """Two-operand contraction as one batched matmul."""
    (sa, sb), out = _einsum_parse(subscripts, 2)
    batch = [c for c in out if c in sa and c in sb]
    contr = [c for c in sa if c in sb and c not in out]
    fa = [c for c in sa if c not in sb]
    fb = [c for c in sb if c not in sa]
    dim = dict(zip(sa, a.shape))
    dim.update(zip(sb, b.shape))
    size = lambda cs: int(np.prod([dim[c] for c in cs])) if cs else 1
    at = a.transpose([sa.index(c) for c in batch + fa + contr]).reshape(size(batch), size(fa), size(contr))
    bt = b.transpose([sb.index(c) for c in batch + contr + fb]).reshape(size(batch), size(contr), size(fb))
    r = np.matmul(at, bt).reshape([dim[c] for c in batch + fa + fb])
    order = batch + fa + fb
    return r.transpose([order.index(c) for c in out])


@_primitive("einsum")
class _Einsum:
    @staticmethod
    def forward(v, subscripts):
        if len(v) == 2:
            return _einsum2(subscripts, v[0], v[1])
        return np.einsum(subscripts, *v, optimize=True)

    @staticmethod
    def vjp(node, g, k):
        ins, out = _einsum_parse(node.attrs["subscripts"], len(node.inputs))
        ops = [g] + [_in(node, j) for j in range(len(ins)) if j != k]
        subs = [out] + [s for j, s in enumerate(ins) if j != k]
        return einsum(",".join(subs) + "->" + ins[k], *ops)


@_primitive("concat")
class _Concat:
    @staticmethod
    def forward(v, axis):
        return np.concatenate(v, axis=axis)

    @staticmethod
    def vjp(node, g, k):
        axis = node.attrs["axis"]
        sizes = [node.tape.nodes[i].shape[axis] for i in node.inputs]
        start = sum(sizes[:k])
        return slice_(g, axis, start, start + sizes[k])


@_primitive("slice")
class _Slice:
    @staticmethod
    def forward(v, axis, start, stop):
        idx = [slice(None)] * v[0].ndim
        idx[axis] = slice(start, stop)
        return v[0][tuple(idx)]

    @staticmethod
    def vjp(node, g, k):
        a = node.attrs
        n = _in(node, 0).shape[a["axis"]]
        return _rec("pad", g, axis=a["axis"], before=a["start"], after=n - a["stop"])


@_primitive("pad")
class _Pad:
    @staticmethod
    def forward(v, axis, before, after):
        widths = [(0, 0)] * v[0].ndim
        widths[axis] = (before, after)
        return np.pad(v[0], widths)

    @staticmethod
    def vjp(node, g, k):
        a = node.attrs
        return slice_(g, a["axis"], a["before"], a["before"] + _in(node, 0).shape[a["axis"]])


@_primitive("sum")
class _Sum:
    @staticmethod
    def forward(v, axis, keepdims):
        return np.sum(v[0], axis=axis, keepdims=keepdims)

    @staticmethod
    def vjp(node, g, k):
        src = _in(node, 0).shape
        a = node.attrs
        if not a["keepdims"]:
            axes = range(len(src)) if a["axis"] is None else _norm_axes(a["axis"], len(src))
            kept = tuple(1 if i in set(axes) else s for i, s in enumerate(src))
            g = reshape(g, kept)
        return broadcast_to(g, src)


def _norm_axes(axis, ndim):
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def _sum_to(x, shape):
    shape = tuple(shape)
    lead = x.ndim - len(shape)
    if lead:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x


@_primitive("sum_to")
class _SumTo:
    @staticmethod
    def forward(v, shape):
        return _sum_to(v[0], shape)

    @staticmethod
    def vjp(node, g, k):
        return broadcast_to(g, _in(node, 0).shape)


@_primitive("broadcast_to")
class _BroadcastTo:
    @staticmethod
    def forward(v, shape):
        return np.broadcast_to(v[0], shape).copy()

    @staticmethod
    def vjp(node, g, k):
        return _unbroadcast_shape(g, _in(node, 0).shape)


@_primitive("reshape")
class _Reshape:
    @staticmethod
    def forward(v, shape):
        return v[0].reshape(shape)

    @staticmethod
    def vjp(node, g, k):
        return reshape(g, _in(node, 0).shape)


@_primitive("transpose")
class _Transpose:
    @staticmethod
    def forward(v, axes):
        return np.transpose(v[0], axes).copy()

    @staticmethod
    def vjp(node, g, k):
        return transpose(g, tuple(np.argsort(node.attrs["axes"])))


@_primitive("gather")
class _Gather:
    @staticmethod
    def forward(v, index):
        return v[0][index]

    @staticmethod
    def vjp(node, g, k):
        return scatter_add(g, node.attrs["index"], _in(node, 0).shape[0])


@_primitive("scatter_add")
class _ScatterAdd:
    @staticmethod
    def forward(v, index, size):
        out = np.zeros((size,) + v[0].shape[1:])
        np.add.at(out, index, v[0])
        return out

    @staticmethod
    def vjp(node, g, k):
        return gather(g, node.attrs["index"])


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


@_primitive("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(v):
        return _sigmoid(v[0])

    @staticmethod
    def vjp(node, g, k):
        # s (1 - s), with s the node itself
        return mul(g, mul(node, add(neg(node), 1.0)))


@_primitive("silu")
class _Silu:
    @staticmethod
    def forward(v):
        return v[0] * _sigmoid(v[0])

    @staticmethod
    def vjp(node, g, k):
        x = _in(node, 0)
        s = sigmoid(x)
        # d/dx x s(x) = s + x s (1 - s)
        return mul(g, add(s, mul(x, mul(s, add(neg(s), 1.0)))))


@_primitive("layernorm")
class _LayerNorm:
    @staticmethod
    def forward(v, eps):
        x = v[0]
        c = x - x.mean(axis=-1, keepdims=True)
        return c / np.sqrt((c * c).mean(axis=-1, keepdims=True) + eps)

    @staticmethod
    def vjp(node, g, k):
        x = _in(node, 0)
        y = node
        c = add(x, neg(_mean_last(x)))
        inv = pow_(add(_mean_last(mul(c, c)), node.attrs["eps"]), -0.5)
        # inv * (g - mean(g) - y * mean(g * y))
        inner_ = add(add(g, neg(_mean_last(g))), neg(mul(y, _mean_last(mul(g, y)))))
        return mul(inv, inner_)


def _mean_last(x: Node) -> Node:
    return scale(_rec("sum", x, axis=-1, keepdims=True), 1.0 / x.shape[-1])


@_primitive("pow")
class _Pow:
    @staticmethod
    def forward(v, p):
        return np.power(v[0], p)

    @staticmethod
    def vjp(node, g, k):
        p = node.attrs["p"]
        return mul(g, scale(pow_(_in(node, 0), p - 1.0), p))


@_primitive("abs")
class _Abs:
    @staticmethod
    def forward(v):
        return np.abs(v[0])

    @staticmethod
    def vjp(node, g, k):
        # sign() is piecewise constant: its own derivative is zero a.e.
        return mul(g, node.tape.constant(np.sign(_in(node, 0).value)))


# ---------------------------------------------------------------------------
# Functional API
# ---------------------------------------------------------------------------


def add(a, b) -> Node:
    return _rec("add", a, b)


def neg(a) -> Node:
    return scale(a, -1.0)


def sub(a, b) -> Node:
    t = _tape_of(a, b)
    return add(a, neg(t._lift(b)))


def mul(a, b) -> Node:
    return _rec("mul", a, b)


def scale(a, c: float) -> Node:
    return _rec("scale", a, c=float(c))


def einsum(subscripts: str, *operands) -> Node:
    _einsum_parse(subscripts, len(operands))
    return _rec("einsum", *operands, subscripts=subscripts)


def _letters(n, skip=""):
    return [c for c in string.ascii_lowercase if c not in skip][:n]


def matvec(a, x) -> Node:
    """(..., m, n) @ (..., n) -> (..., m); batch dims must match exactly."""
    t = _tape_of(a, x)
    a, x = t._lift(a), t._lift(x)
    if a.ndim != x.ndim + 1:
        raise ParameterError(f"matvec shape mismatch: {a.shape} and {x.shape}")
    b = "".join(_letters(x.ndim - 1, "mn"))
    return einsum(f"{b}mn,{b}n->{b}m", a, x)


def inner(x, y) -> Node:
    """Full contraction sum(x * y) to a scalar; shapes must match."""
    t = _tape_of(x, y)
    x, y = t._lift(x), t._lift(y)
    if x.shape != y.shape:
        raise ParameterError(f"inner shape mismatch: {x.shape} and {y.shape}")
    s = "".join(_letters(x.ndim))
    return einsum(f"{s},{s}->", x, y)


def concat(nodes: Sequence, axis: int = 0) -> Node:
    return _rec("concat", *nodes, axis=axis)


def slice_(a, axis: int, start: int, stop: int) -> Node:
    return _rec("slice", a, axis=axis % a.ndim, start=int(start), stop=int(stop))


def sum_(a, axis=None, keepdims=False) -> Node:
    return _rec("sum", a, axis=axis, keepdims=keepdims)


def broadcast_to(a, shape) -> Node:
    return _rec("broadcast_to", a, shape=tuple(shape))


def reshape(a, shape) -> Node:
    return _rec("reshape", a, shape=tuple(shape))


def transpose(a, axes) -> Node:
    return _rec("transpose", a, axes=tuple(axes))


def gather(a, index) -> Node:
    return _rec("gather", a, index=np.asarray(index, dtype=np.intp))


def scatter_add(a, index, size: int) -> Node:
    return _rec("scatter_add", a, index=np.asarray(index, dtype=np.intp), size=int(size))


def sigmoid(a) -> Node:
    return _rec("sigmoid", a)


def silu(a) -> Node:
    return _rec("silu", a)


def layernorm(a, eps: float = 1e-5) -> Node:
    """Zero-mean unit-variance normalization over the last axis (no affine part)."""
    return _rec("layernorm", a, eps=float(eps))


def pow_(a, p: float) -> Node:
    return _rec("pow", a, p=float(p))


def abs_(a) -> Node:
    return _rec("abs", a)


def detach(a: Node) -> Node:
    """A constant copy of ``a``: gradients do not flow through it."""
    return a.tape.constant(a.value.copy())


_ALIASES = {
    "sub": sub,
    "matvec": matvec,
    "inner": inner,
    "elementwise-mul": mul,
    "elementwise_mul": mul,
}

PRIMITIVES = tuple(sorted(set(_PRIMS) | set(_ALIASES)))


# ---------------------------------------------------------------------------
# Verification utility
# ---------------------------------------------------------------------------


@dataclass
class FiniteDiffResult:
    max_rel_error: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    def __float__(self):
        return self.max_rel_error


def finite_diff_check(
    fn: Callable[[Node], Node], point, step: float = 1e-5, order: int = 2
) -> FiniteDiffResult:
    """Compare the tape gradient of ``fn`` at ``point`` with central differences.

    ``fn`` maps a variable node (shaped like ``point``) to a scalar node.
    The relative error per component uses max(|analytic|, |numeric|, 1e-8)
    as denominator.  ``order=4`` uses the five-point central stencil, whose
    truncation error is O(step^4) instead of O(step^2).
    """
    if not step > 0:
        raise ParameterError("step must be positive")
    if order not in (2, 4):
        raise ParameterError("order must be 2 or 4")
    x0 = np.array(point, dtype=np.float64)

    def value_at(x):
        tape = Tape()
        return float(fn(tape.variable(x)).value)

    tape = Tape()
    xv = tape.variable(x0)
    out = fn(xv)
    if not np.all(np.isfinite(out.value)):
        raise DiagnosticError("function is non-finite at the base point")
    (g,) = tape.grad(out, [xv])
    analytic = g.value.ravel().copy()
    bad = np.flatnonzero(~np.isfinite(analytic))
    if bad.size:
        raise DiagnosticError(f"analytic gradient non-finite at component {bad[0]}", int(bad[0]))
    numeric = np.empty_like(analytic)
    flat = x0.ravel()
    stencil = {1: 0.5, -1: -0.5} if order == 2 else {2: -1 / 12, 1: 8 / 12, -1: -8 / 12, -2: 1 / 12}
    for i in range(flat.size):
        acc = 0.0
        for shift, weight in stencil.items():
            x = flat.copy()
            x[i] += shift * step
            fx = value_at(x.reshape(x0.shape))
            if not np.isfinite(fx):
                raise DiagnosticError(f"non-finite evaluation when perturbing component {i}", i)
            acc += weight * fx
        numeric[i] = acc / step
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    err = float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
    return FiniteDiffResult(err, analytic, numeric)
