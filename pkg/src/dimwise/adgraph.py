"""Define-by-run reverse-mode automatic differentiation.

Every evaluation records its primitives on a :class:`Tape`.  A reverse sweep
(:meth:`Tape.vjp`) walks the recorded nodes in decreasing id order and
accumulates cotangents.  Two features go beyond a textbook tape:

* ``detach`` severs a backward edge while keeping the forward value.  The
  severed edge contributes nothing to a plain sweep, but a *reconnect hook*
  registered at detach time can route the cotangent to the severed source in
  :meth:`Tape.vjp_with_reconnect`.  Splicing a graph and reconnecting gives the
  same parameter gradients as the unspliced graph.
* ``create_graph=True`` records the sweep itself as ordinary primitives, so the
  returned adjoints are nodes that can be differentiated again.

All values are float64 numpy arrays.  Recorded values are never modified in
place, so forward rules may return views.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Cotangent",
    "MissingReconnectHook",
    "Node",
    "Primitive",
    "SecondOrderError",
    "ShapeError",
    "Tape",
    "UnknownPrimitiveError",
    "PRIMITIVES",
    "register_primitive",
    "total_sweeps",
]

# reverse sweeps performed by all tapes in this process
_SWEEPS = [0]


def total_sweeps():
    """Reverse sweeps run so far across every tape."""
    return _SWEEPS[0]



class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, primitive, *shapes, detail=""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        names = " vs ".join(str(s) for s in self.shapes)
        msg = f"{primitive}: incompatible shapes {names}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class UnknownPrimitiveError(ValueError):
    pass


class SecondOrderError(NotImplementedError):
    """A primitive was asked for a differentiable backward rule it lacks."""


class MissingReconnectHook(RuntimeError):
    """A severed edge without a hook carried cotangent in a reconnecting sweep."""


# ---------------------------------------------------------------------------
# Nodes


class Node:
    """A recorded value on a tape."""

    __slots__ = ("tape", "id", "value", "op", "parents", "attrs", "requires_grad")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, tape, nid, value, op, parents, attrs, requires_grad):
        self.tape = tape
        self.id = nid
        self.value = value
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def mT(self):
        return transpose(self)


@dataclass(frozen=True)
class Cotangent:
    """An adjoint seed for ``node_id``."""

    node_id: int
    values: np.ndarray


# ---------------------------------------------------------------------------
# Primitive registry


@dataclass(frozen=True)
class Primitive:
    """Forward rule, backward rule and optional shape check of one primitive.

    ``vjp(g, xs, y, attrs, needs)`` returns one cotangent per parent (or None).
    In a plain sweep ``g``, ``xs`` and ``y`` are arrays; under
    ``create_graph`` they are nodes, and the rule must only use the
    dispatching functions of this module so the sweep gets recorded.
    """

    name: str
    forward: Callable
    vjp: Callable
    check: Callable | None = None
    higher_order: bool = True


PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(name, forward, vjp, check=None, higher_order=True):
    PRIMITIVES[name] = Primitive(name, forward, vjp, check, higher_order)
    return PRIMITIVES[name]


def _val(x):
    return x.value if isinstance(x, Node) else x


def _reduce_axes(gshape, shape):
    lead = len(gshape) - len(shape)
    axes = list(range(lead))
    for i, s in enumerate(shape):
        if s == 1 and gshape[lead + i] != 1:
            axes.append(lead + i)
    return tuple(axes)


def sum_to(g, shape):
    """Reduce a broadcast cotangent back to ``shape``."""
    shape = tuple(shape)
    if tuple(g.shape) == shape:
        return g
    axes = _reduce_axes(tuple(g.shape), shape)
    return reshape(sum_(g, axis=axes, keepdims=True), shape)


def _vjp_add(g, xs, y, attrs, needs):
    a, b = xs
    return (sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None)


def _vjp_sub(g, xs, y, attrs, needs):
    a, b = xs
    return (sum_to(g, a.shape) if needs[0] else None,
            neg(sum_to(g, b.shape)) if needs[1] else None)


def _vjp_mul(g, xs, y, attrs, needs):
    a, b = xs
    return (sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None)


def _check_matmul(shapes, attrs):
    sa, sb = shapes
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2]:
        raise ShapeError("matmul", sa, sb)
    try:
        np.broadcast_shapes(sa[:-2], sb[:-2])
    except ValueError:
        raise ShapeError("matmul", sa, sb, detail="batch dims") from None


def _vjp_matmul(g, xs, y, attrs, needs):
    a, b = xs
    ga = sum_to(matmul(g, transpose(b)), a.shape) if needs[0] else None
    gb = None
    if needs[1]:
        if len(b.shape) == 2 and len(a.shape) > 2:
            # fold batch dims into rows: one 2-D product instead of a batched one
            k = a.shape[-1]
            gb = matmul(transpose(reshape(a, (-1, k))), reshape(g, (-1, b.shape[-1])))
        else:
            gb = sum_to(matmul(transpose(a), g), b.shape)
    return ga, gb


def _fwd_concat(vals, attrs):
    return np.concatenate(vals, axis=attrs["axis"])


def _check_concat(shapes, attrs):
    axis = attrs["axis"]
    ref = shapes[0]
    for s in shapes[1:]:
        if len(s) != len(ref):
            raise ShapeError("concat", ref, s)
        ax = axis % len(ref)
        if any(s[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, s)


def _vjp_concat(g, xs, y, attrs, needs):
    axis = attrs["axis"] % len(y.shape)
    out = []
    start = 0
    for x, need in zip(xs, needs):
        n = x.shape[axis]
        if need:
            index = (slice(None),) * axis + (slice(start, start + n),)
            out.append(slice_(g, index))
        else:
            out.append(None)
        start += n
    return tuple(out)


def _fwd_slice(vals, attrs):
    return np.array(vals[0][attrs["index"]], dtype=np.float64)


def _vjp_slice(g, xs, y, attrs, needs):
    return (embed(g, xs[0].shape, attrs["index"]),)


def _fwd_embed(vals, attrs):
    out = np.zeros(attrs["shape"])
    out[attrs["index"]] = vals[0]
    return out


def _vjp_embed(g, xs, y, attrs, needs):
    return (slice_(g, attrs["index"]),)


def _fwd_sum(vals, attrs):
    return np.asarray(np.sum(vals[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)))


def _vjp_sum(g, xs, y, attrs, needs):
    shape = xs[0].shape
    axis = attrs.get("axis")
    if not attrs.get("keepdims", False):
        if axis is None:
            kshape = (1,) * len(shape)
        else:
            axes = {a % len(shape) for a in (axis if isinstance(axis, tuple) else (axis,))}
            kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
        g = reshape(g, kshape)
    return (broadcast_to(g, shape),)


def _check_broadcast(shapes, attrs):
    try:
        if np.broadcast_shapes(shapes[0], attrs["shape"]) != tuple(attrs["shape"]):
            raise ValueError
    except ValueError:
        raise ShapeError("broadcast", shapes[0], attrs["shape"]) from None


def _vjp_broadcast(g, xs, y, attrs, needs):
    return (sum_to(g, xs[0].shape),)


def _check_reshape(shapes, attrs):
    shape = attrs["shape"]
    size = int(np.prod(shapes[0]))
    known = int(np.prod([s for s in shape if s != -1]))
    free = sum(1 for s in shape if s == -1)
    if free > 1 or (free == 0 and known != size) or (free == 1 and (known == 0 or size % known)):
        raise ShapeError("reshape", shapes[0], shape)


def _vjp_reshape(g, xs, y, attrs, needs):
    return (reshape(g, xs[0].shape),)


def _check_transpose(shapes, attrs):
    if len(shapes[0]) < 2:
        raise ShapeError("transpose", shapes[0], detail="needs ndim >= 2")


def _vjp_transpose(g, xs, y, attrs, needs):
    return (transpose(g),)


def _vjp_tanh(g, xs, y, attrs, needs):
    return (mul(g, sub(1.0, square(y))),)


def _fwd_elu(vals, attrs):
    x = vals[0]
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _vjp_elu(g, xs, y, attrs, needs):
    pos = (_val(xs[0]) > 0).astype(np.float64)
    # elu'(x) = 1 for x > 0, elu(x) + 1 otherwise
    return (mul(g, add(pos, mul(1.0 - pos, add(y, 1.0)))),)


def _fwd_swish(vals, attrs):
    return vals[0] * expit(vals[0])


def _vjp_swish(g, xs, y, attrs, needs):
    s = sigmoid(xs[0])
    return (mul(g, add(s, mul(y, sub(1.0, s)))),)


def _vjp_sigmoid(g, xs, y, attrs, needs):
    return (mul(g, mul(y, sub(1.0, y))),)


def _vjp_sin(g, xs, y, attrs, needs):
    return (mul(g, cos(xs[0])),)


def _vjp_cos(g, xs, y, attrs, needs):
    return (neg(mul(g, sin(xs[0]))),)


def _vjp_exp(g, xs, y, attrs, needs):
    return (mul(g, y),)


def _vjp_log(g, xs, y, attrs, needs):
    return (mul(g, reciprocal(xs[0])),)


def _vjp_softplus(g, xs, y, attrs, needs):
    return (mul(g, sigmoid(xs[0])),)


def _fwd_softmax(vals, attrs):
    x = vals[0]
    axis = attrs["axis"]
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def _vjp_softmax(g, xs, y, attrs, needs):
    inner = sum_(mul(g, y), axis=attrs["axis"], keepdims=True)
    return (mul(y, sub(g, inner)),)


def _vjp_reciprocal(g, xs, y, attrs, needs):
    return (neg(mul(g, square(y))),)


def _vjp_square(g, xs, y, attrs, needs):
    return (mul(g, mul(2.0, xs[0])),)


def _vjp_identity(g, xs, y, attrs, needs):
    return (g,)


def _elementwise(fn):
    return lambda vals, attrs: fn(vals[0])


register_primitive("add", lambda v, a: v[0] + v[1], _vjp_add)
register_primitive("sub", lambda v, a: v[0] - v[1], _vjp_sub)
register_primitive("mul", lambda v, a: v[0] * v[1], _vjp_mul)
register_primitive("matmul", lambda v, a: np.matmul(v[0], v[1]), _vjp_matmul, _check_matmul)
register_primitive("concat", _fwd_concat, _vjp_concat, _check_concat)
register_primitive("slice", _fwd_slice, _vjp_slice)
register_primitive("embed", _fwd_embed, _vjp_embed)
register_primitive("sum", _fwd_sum, _vjp_sum)
register_primitive("broadcast", lambda v, a: np.broadcast_to(v[0], a["shape"]),
                   _vjp_broadcast, _check_broadcast)
register_primitive("reshape", lambda v, a: v[0].reshape(a["shape"]), _vjp_reshape, _check_reshape)
register_primitive("transpose", lambda v, a: np.swapaxes(v[0], -1, -2),
                   _vjp_transpose, _check_transpose)
register_primitive("tanh", _elementwise(np.tanh), _vjp_tanh)
register_primitive("elu", _fwd_elu, _vjp_elu)
register_primitive("swish", _fwd_swish, _vjp_swish)
register_primitive("sigmoid", _elementwise(expit), _vjp_sigmoid)
register_primitive("sin", _elementwise(np.sin), _vjp_sin)
register_primitive("cos", _elementwise(np.cos), _vjp_cos)
register_primitive("exp", _elementwise(np.exp), _vjp_exp)
register_primitive("log", _elementwise(np.log), _vjp_log)
register_primitive("softplus", _elementwise(lambda x: np.logaddexp(0.0, x)), _vjp_softplus)
register_primitive("softmax", _fwd_softmax, _vjp_softmax)
register_primitive("reciprocal", _elementwise(np.reciprocal), _vjp_reciprocal)
register_primitive("square", _elementwise(np.square), _vjp_square)
register_primitive("detach", _elementwise(lambda x: x), _vjp_identity)


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Append-only record of one evaluation.

    Attributes
    ----------
    nodes : list of Node
        Topologically ordered by construction.
    detached_edges : set of (child_id, parent_id)
    reconnect_hooks : dict mapping a detached edge to ``hook(cotangent)``
    n_sweeps : int
        Number of reverse sweeps performed so far.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.detached_edges: set[tuple[int, int]] = set()
        self.reconnect_hooks: dict[tuple[int, int], Callable] = {}
        self.n_sweeps = 0
        self._bound: dict = {}

    def __len__(self):
        return len(self.nodes)

    def _append(self, value, op, parents, attrs, requires_grad):
        node = Node(self, len(self.nodes), value, op, parents, attrs, requires_grad)
        self.nodes.append(node)
        return node

    def leaf(self, value, requires_grad=True):
        return self._append(np.array(value, dtype=np.float64), "leaf", (), None, requires_grad)

    def constant(self, value):
        return self.leaf(value, requires_grad=False)

    def bind(self, key, value, requires_grad=True):
        """Return the leaf for ``key`` on this tape, creating it once."""
        node = self._bound.get(key)
        if node is None:
            node = self.leaf(value, requires_grad=requires_grad)
            self._bound[key] = node
        return node

    def cached(self, key, build):
        node = self._bound.get(key)
        if node is None:
            node = build()
            self._bound[key] = node
        return node

    def _own(self, x):
        if isinstance(x, Node):
            if x.tape is not self:
                raise ValueError(f"{x!r} belongs to a different tape")
            return x
        return self.constant(x)

    def record(self, primitive, parents, attrs=None):
        """Apply ``primitive`` to ``parents`` and append the result."""
        prim = PRIMITIVES.get(primitive)
        if prim is None:
            raise UnknownPrimitiveError(f"unknown primitive {primitive!r}")
        parents = tuple(self._own(p) for p in parents)
        attrs = attrs or {}
        vals = [p.value for p in parents]
        if prim.check is not None:
            prim.check([v.shape for v in vals], attrs)
        try:
            value = prim.forward(vals, attrs)
        except ValueError as exc:
            raise ShapeError(primitive, *(v.shape for v in vals), detail=str(exc)) from None
        if type(value) is not np.ndarray or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        requires_grad = any(p.requires_grad for p in parents)
        return self._append(value, primitive, parents, attrs, requires_grad)

    def detach(self, node, reconnect=None):
        """Copy ``node`` with its backward edge severed.

        ``reconnect`` is None (no hook), True (route the cotangent unchanged
        to ``node`` during :meth:`vjp_with_reconnect`) or a callable mapping
        the cotangent of the detached copy to a cotangent for ``node``.
        """
        node = self._own(node)
        out = self._append(node.value, "detach", (node,), {}, node.requires_grad)
        edge = (out.id, node.id)
        self.detached_edges.add(edge)
        if reconnect is True:
            self.reconnect_hooks[edge] = _identity_hook
        elif reconnect is not None:
            self.reconnect_hooks[edge] = reconnect
        return out

    def stop_gradient(self, node):
        """A constant with ``node``'s value; not an edge at all."""
        return self.constant(_val(node))

    # -- reverse sweeps ----------------------------------------------------

    def _severed(self, node, reconnect):
        return node.op == "detach" and not reconnect

    def _live(self, output, wrt_ids, reconnect):
        lo = min(wrt_ids) if wrt_ids else 0
        seen = {output.id}
        stack = [output]
        while stack:
            n = stack.pop()
            if self._severed(n, reconnect):
                continue
            for p in n.parents:
                if p.requires_grad and p.id >= lo and p.id not in seen:
                    seen.add(p.id)
                    stack.append(p)
        if wrt_ids is None:
            return seen
        nodes = self.nodes
        live = set()
        for nid in sorted(seen):
            n = nodes[nid]
            if nid in wrt_ids:
                live.add(nid)
            elif not self._severed(n, reconnect) and any(p.id in live for p in n.parents):
                live.add(nid)
        return live

    def vjp(self, output, cotangent=None, wrt=None, create_graph=False, reconnect=False):
        """One reverse sweep from ``output``.

        Parameters
        ----------
        output : Node
        cotangent : array, Node or Cotangent, optional
            Defaults to 1 for a single-element output.
        wrt : iterable of Node, optional
            Restrict the sweep to paths ending in these nodes.  Without it,
            adjoints of every reached node are returned.
        create_graph : bool
            Record the sweep so the adjoints are differentiable nodes.
        reconnect : bool
            Route cotangents across detached edges through their hooks.

        Returns
        -------
        dict mapping node id to adjoint (array, or Node under create_graph).
        """
        output = self._own(output)
        if isinstance(cotangent, Cotangent):
            if cotangent.node_id != output.id:
                raise ValueError("cotangent targets a different node")
            cotangent = cotangent.values
        if cotangent is None:
            if output.size != 1:
                raise ShapeError("vjp", output.shape, (),
                                 detail="non-scalar output needs a cotangent")
            cotangent = np.ones(output.shape)
        if tuple(_val(cotangent).shape) != output.shape:
            raise ShapeError("vjp", output.shape, _val(cotangent).shape)
        wrt_ids = None if wrt is None else {self._own(w).id for w in wrt}

        self.n_sweeps += 1
        _SWEEPS[0] += 1
        if not output.requires_grad:
            return {}
        live = self._live(output, wrt_ids, reconnect)
        if create_graph:
            seed = cotangent if isinstance(cotangent, Node) else self.constant(cotangent)
        else:
            seed = np.array(_val(cotangent), dtype=np.float64)

        nodes = self.nodes
        adj = {output.id: seed}
        results = {}
        for nid in sorted(live, reverse=True):
            g = adj.pop(nid, None)
            if g is None:
                continue
            if wrt_ids is None or nid in wrt_ids:
                results[nid] = g
            node = nodes[nid]
            if node.op == "leaf":
                continue
            parents = node.parents
            if node.op == "detach":
                if not reconnect:
                    continue
                edge = (nid, parents[0].id)
                hook = self.reconnect_hooks.get(edge)
                if hook is None:
                    raise MissingReconnectHook(
                        f"detached edge {edge} carries cotangent but has no reconnect hook")
                grads = (hook(g),)
            else:
                prim = PRIMITIVES[node.op]
                if create_graph and not prim.higher_order:
                    raise SecondOrderError(
                        f"primitive {node.op!r} has no differentiable backward rule")
                needs = tuple(p.id in live for p in parents)
                if create_graph:
                    grads = prim.vjp(g, parents, node, node.attrs, needs)
                else:
                    grads = prim.vjp(g, [p.value for p in parents], node.value,
                                     node.attrs, needs)
            for p, gp in zip(parents, grads):
                if gp is None or p.id not in live:
                    continue
                prev = adj.get(p.id)
                adj[p.id] = gp if prev is None else add(prev, gp)
        return results

    def vjp_with_reconnect(self, output, cotangent=None, wrt=None, create_graph=False):
        """Reverse sweep that re-injects cotangents along detached edges."""
        return self.vjp(output, cotangent, wrt=wrt, create_graph=create_graph, reconnect=True)

    def grad(self, output, wrt: Sequence[Node], cotangent=None, create_graph=False,
             reconnect=False):
        """Adjoints of ``output`` for each node of ``wrt`` (zeros if unreached)."""
        wrt = list(wrt)
        adj = self.vjp(output, cotangent, wrt=wrt, create_graph=create_graph,
                       reconnect=reconnect)
        out = []
        for w in wrt:
            g = adj.get(w.id)
            if g is None:
                g = self.constant(np.zeros(w.shape)) if create_graph else np.zeros(w.shape)
            out.append(g)
        return out


def _identity_hook(g):
    return g


# ---------------------------------------------------------------------------
# Dispatching functions: record on a tape when any operand is a Node,
# otherwise compute directly on arrays.


def _tape_of(args):
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def _apply(name, args, attrs=None):
    tape = _tape_of(args)
    if tape is None:
        vals = [np.asarray(a, dtype=np.float64) for a in args]
        return np.asarray(PRIMITIVES[name].forward(vals, attrs or {}), dtype=np.float64)
    return tape.record(name, args, attrs)


def add(a, b):
    return _apply("add", (a, b))


def sub(a, b):
    return _apply("sub", (a, b))


def mul(a, b):
    return _apply("mul", (a, b))


def neg(a):
    return _apply("mul", (a, -1.0))


def div(a, b):
    return mul(a, reciprocal(b))


def matmul(a, b):
    if _val(b).ndim == 1:
        n = _val(b).shape[0]
        out = _apply("matmul", (a, reshape(b, (n, 1))))
        return reshape(out, _val(out).shape[:-1])
    if _val(a).ndim == 1:
        n = _val(a).shape[0]
        out = _apply("matmul", (reshape(a, (1, n)), b))
        return reshape(out, _val(out).shape[:-2] + _val(out).shape[-1:])
    return _apply("matmul", (a, b))


def concat(xs: Iterable, axis=-1):
    return _apply("concat", tuple(xs), {"axis": axis})


def slice_(x, index):
    return _apply("slice", (x,), {"index": index})


def embed(x, shape, index):
    return _apply("embed", (x,), {"shape": tuple(shape), "index": index})


def sum_(x, axis=None, keepdims=False):
    if isinstance(axis, list):
        axis = tuple(axis)
    return _apply("sum", (x,), {"axis": axis, "keepdims": keepdims})


def mean(x, axis=None, keepdims=False):
    shape = _val(x).shape
    if axis is None:
        count = int(np.prod(shape))
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def broadcast_to(x, shape):
    return _apply("broadcast", (x,), {"shape": tuple(shape)})


def reshape(x, shape):
    return _apply("reshape", (x,), {"shape": tuple(shape)})


def transpose(x):
    """Swap the last two axes."""
    return _apply("transpose", (x,))


def tanh(x):
    return _apply("tanh", (x,))


def elu(x):
    return _apply("elu", (x,))


def swish(x):
    return _apply("swish", (x,))


def sigmoid(x):
    return _apply("sigmoid", (x,))


def sin(x):
    return _apply("sin", (x,))


def cos(x):
    return _apply("cos", (x,))


def exp(x):
    return _apply("exp", (x,))


def log(x):
    return _apply("log", (x,))


def softplus(x):
    return _apply("softplus", (x,))


def softmax(x, axis=-1):
    return _apply("softmax", (x,), {"axis": axis})


def reciprocal(x):
    return _apply("reciprocal", (x,))


def square(x):
    return _apply("square", (x,))


def abs_(x):
    # sign is piecewise constant, so it can enter as a constant factor
    return mul(x, np.sign(_val(x)))


def logsumexp(x, axis=-1, keepdims=False):
    shift = np.max(_val(x), axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    out = add(log(sum_(exp(sub(x, shift)), axis=axis, keepdims=True)), shift)
    if not keepdims:
        shape = tuple(s for i, s in enumerate(_val(out).shape) if i != axis % _val(out).ndim)
        out = reshape(out, shape)
    return out


def log_softmax(x, axis=-1):
    return sub(x, logsumexp(x, axis=axis, keepdims=True))


ACTIVATIONS = {
    "tanh": tanh,
    "elu": elu,
    "swish": swish,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "square": square,
    "linear": lambda x: x,
}


def activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}")
