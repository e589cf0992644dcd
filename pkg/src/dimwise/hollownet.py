"""HollowNet: networks whose Jacobian splits into a diagonal and a hollow part.

The conditioner produces, for every dimension ``i``, a hidden vector ``h_i``
that never sees ``x_i``: one masked autoregressive network looks at
``x_{<i}``, an oppositely ordered one looks at ``x_{>i}``, and their outputs
are concatenated.  A transformer ``tau`` shared across dimensions then maps
``(x_i, h_i)`` to ``f_i``.

Detaching ``h`` leaves ``tau`` as the only path from ``x_i`` to ``f_i``, so a
single vector-Jacobian product with a vector of ones returns the Jacobian
diagonal, and iterating gives ``k``-th dimension-wise derivatives in ``k``
sweeps.  The detached edge carries a reconnect hook, so parameter gradients
of any loss built on these derivatives are those of the unspliced network.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import adgraph as ag
from .adgraph import Node, Tape

__all__ = [
    "HollowConfig",
    "HollowNet",
    "MaskedLinear",
    "build_masks",
    "brute_force_jacobian",
    "load_checkpoint",
    "save_checkpoint",
]


class ConfigError(ValueError):
    pass


def _input_degrees(d, ordering):
    if ordering == "increasing":
        return np.arange(1, d + 1)
    if ordering == "decreasing":
        return np.arange(d, 0, -1)
    raise ValueError(f"unknown ordering {ordering!r}")


def build_masks(d, hidden_sizes, ordering="increasing", out_per_dim=1, n_cond=0):
    """MADE masks for a strictly autoregressive network.

    Output unit ``(i, j)`` (dimension ``i``, feature ``j``; stored at column
    ``i * out_per_dim + j``) only sees inputs strictly before ``i`` in the
    given ordering.  Hidden units get degrees ``0 .. d-1`` cyclically, a unit
    of degree 0 seeing no inputs at all, so every hidden layer needs at least
    ``d`` units when ``d > 1``.  Masks are ``(in, out)``; ``n_cond`` extra
    input rows at the bottom of the first mask are connected to every unit.
    """
    if d < 1:
        raise ConfigError("d must be >= 1")
    hidden_sizes = list(hidden_sizes)
    if not hidden_sizes:
        raise ConfigError("at least one hidden layer is required")
    for width in hidden_sizes:
        if d > 1 and width < d:
            raise ConfigError(f"hidden layer of width {width} cannot carry degrees for d={d}")
    m_in = _input_degrees(d, ordering)
    degrees = [m_in] + [np.arange(w) % d for w in hidden_sizes]
    masks = []
    for prev, nxt in zip(degrees[:-1], degrees[1:]):
        masks.append((nxt[None, :] >= prev[:, None]).astype(np.float64))
    m_out = np.repeat(m_in, out_per_dim)
    masks.append((m_out[None, :] > degrees[-1][:, None]).astype(np.float64))
    if n_cond:
        masks[0] = np.vstack([masks[0], np.ones((n_cond, masks[0].shape[1]))])
    return masks


@dataclass
class MaskedLinear:
    """Dense layer ``x @ (weight * mask) + bias`` with ``weight`` stored (in, out)."""

    weight: np.ndarray
    bias: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.weight.shape != self.mask.shape:
            raise ag.ShapeError("MaskedLinear", self.weight.shape, self.mask.shape)

    @property
    def effective_weight(self):
        return self.weight * self.mask


@dataclass
class HollowConfig:
    d: int
    d_h: int = 8
    cond_hidden: tuple = (32,)
    trans_hidden: tuple = (32, 32)
    activation: str = "tanh"
    cond_activation: str | None = None
    n_cond: int = 0
    shared_transformer: bool = True
    output_activation: str | None = None
    zero_init_final: bool = True
    seed: int = 0

    def __post_init__(self):
        self.cond_hidden = tuple(int(w) for w in self.cond_hidden)
        self.trans_hidden = tuple(int(w) for w in self.trans_hidden)
        if self.d_h % 2:
            raise ConfigError(f"d_h must be even, got {self.d_h}")
        if self.d_h < 2:
            raise ConfigError("d_h must be >= 2")
        ag.activation(self.activation)
        if self.cond_activation is not None:
            ag.activation(self.cond_activation)
        if self.output_activation is not None:
            ag.activation(self.output_activation)


class HollowNet:
    """Conditioner plus per-dimension transformer.

    Parameters live in :attr:`params` (name -> float64 array).  Methods accept
    either arrays, in which case a private tape is used and arrays come back,
    or nodes, in which case everything is recorded on the node's tape.
    """

    def __init__(self, config: HollowConfig, params=None):
        self.config = config
        d = config.d
        half = config.d_h // 2
        self.masks = {
            "fwd": build_masks(d, config.cond_hidden, "increasing", half, config.n_cond),
            "bwd": build_masks(d, config.cond_hidden, "decreasing", half, config.n_cond),
        }
        self.params = self._init_params(np.random.default_rng(config.seed)) if params is None \
            else {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    # -- construction ------------------------------------------------------

    def _init_params(self, rng):
        cfg = self.config
        params = {}
        for side in ("fwd", "bwd"):
            for i, mask in enumerate(self.masks[side]):
                fan_in = mask.shape[0]
                bound = 1.0 / np.sqrt(fan_in)
                params[f"cond.{side}.{i}.W"] = rng.uniform(-bound, bound, mask.shape)
                params[f"cond.{side}.{i}.b"] = rng.uniform(-bound, bound, mask.shape[1])
        sizes = [1 + cfg.d_h + cfg.n_cond, *cfg.trans_hidden, 1]
        lead = () if cfg.shared_transformer else (cfg.d,)
        n_layers = len(sizes) - 1
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(a)
            if i == n_layers - 1 and cfg.zero_init_final:
                params[f"trans.{i}.W"] = np.zeros(lead + (a, b))
                params[f"trans.{i}.b"] = np.zeros(lead + (1, b) if lead else (b,))
            else:
                params[f"trans.{i}.W"] = rng.uniform(-bound, bound, lead + (a, b))
                params[f"trans.{i}.b"] = rng.uniform(-bound, bound, lead + (1, b) if lead else (b,))
        return params

    @property
    def d(self):
        return self.config.d

    @property
    def n_params(self):
        return int(sum(v.size for v in self.params.values()))

    def masked_layers(self, side):
        n = len(self.masks[side])
        return [MaskedLinear(self.params[f"cond.{side}.{i}.W"], self.params[f"cond.{side}.{i}.b"],
                             self.masks[side][i]) for i in range(n)]

    def bind(self, tape: Tape):
        """Leaf nodes for every parameter on ``tape`` (one set per tape)."""
        return {name: tape.bind((id(self), name), value) for name, value in self.params.items()}

    def _masked_weight(self, tape, params, side, i):
        return tape.cached((id(self), side, i, "masked"),
                           lambda: ag.mul(params[f"cond.{side}.{i}.W"], self.masks[side][i]))

    # -- graph pieces ------------------------------------------------------

    def _cond_node(self, tape, cond, n):
        c = self.config.n_cond
        if c == 0:
            return None
        if cond is None:
            raise ConfigError(f"network expects {c} conditioning inputs")
        if isinstance(cond, Node):
            if cond.shape != (n, c):
                cond = ag.broadcast_to(ag.reshape(cond, (-1, c) if cond.size != 1 else (1, 1)), (n, c))
            return cond
        arr = np.asarray(cond, dtype=np.float64)
        arr = np.broadcast_to(arr.reshape(-1, c) if arr.size != 1 else arr.reshape(1, 1), (n, c))
        return tape.constant(arr)

    def conditioner(self, x: Node, cond=None):
        """``h`` of shape (N, d, d_h); ``h[:, i]`` does not depend on ``x[:, i]``."""
        tape = x.tape
        params = self.bind(tape)
        n, d = x.shape
        cfg = self.config
        cnode = self._cond_node(tape, cond, n)
        inp = x if cnode is None else ag.concat([x, cnode], axis=-1)
        act = ag.activation(cfg.cond_activation or cfg.activation)
        halves = []
        for side in ("fwd", "bwd"):
            z = inp
            n_layers = len(self.masks[side])
            for i in range(n_layers):
                z = ag.add(ag.matmul(z, self._masked_weight(tape, params, side, i)),
                           params[f"cond.{side}.{i}.b"])
                if i < n_layers - 1:
                    z = act(z)
            halves.append(ag.reshape(z, (n, d, cfg.d_h // 2)))
        return ag.concat(halves, axis=-1)

    def transformer(self, x: Node, h: Node, cond=None):
        """``f_i = tau(x_i, h_i[, cond])`` for all ``i`` at once; shape (N, d)."""
        tape = x.tape
        params = self.bind(tape)
        cfg = self.config
        n, d = x.shape
        cnode = self._cond_node(tape, cond, n)
        if cfg.shared_transformer:
            # dimension axis folded into the batch: rows are (sample, dim) pairs
            parts = [ag.reshape(x, (n * d, 1)), ag.reshape(h, (n * d, cfg.d_h))]
            if cnode is not None:
                c = cfg.n_cond
                parts.append(ag.reshape(
                    ag.broadcast_to(ag.reshape(cnode, (n, 1, c)), (n, d, c)), (n * d, c)))
            z = ag.concat(parts, axis=-1)
        else:
            parts = [ag.reshape(x, (n, d, 1)), h]
            if cnode is not None:
                c = cfg.n_cond
                parts.append(ag.broadcast_to(ag.reshape(cnode, (n, 1, c)), (n, d, c)))
            z = ag.reshape(ag.concat(parts, axis=-1), (n, d, 1, -1))
        act = ag.activation(cfg.activation)
        n_layers = len(cfg.trans_hidden) + 1
        for i in range(n_layers):
            z = ag.add(ag.matmul(z, params[f"trans.{i}.W"]), params[f"trans.{i}.b"])
            if i < n_layers - 1:
                z = act(z)
        out = ag.reshape(z, (n, d))
        if cfg.output_activation is not None:
            out = ag.activation(cfg.output_activation)(out)
        return out

    # -- public operators --------------------------------------------------

    def _as_node(self, x):
        if isinstance(x, Node):
            if x.ndim != 2 or x.shape[1] != self.d:
                raise ag.ShapeError("HollowNet", x.shape, (None, self.d))
            return x, False, False
        arr = np.asarray(x, dtype=np.float64)
        squeeze = arr.ndim == 1
        arr = arr.reshape(1, -1) if squeeze else arr
        if arr.ndim != 2 or arr.shape[1] != self.d:
            raise ag.ShapeError("HollowNet", arr.shape, (None, self.d))
        return Tape().leaf(arr), True, squeeze

    @staticmethod
    def _out(node, as_array, squeeze):
        if not as_array:
            return node
        v = node.value
        return v[0] if squeeze else v

    def forward(self, x, cond=None):
        """Unspliced evaluation ``f(x)``."""
        xn, as_array, squeeze = self._as_node(x)
        f = self.transformer(xn, self.conditioner(xn, cond), cond)
        return self._out(f, as_array, squeeze)

    __call__ = forward

    def spliced(self, x: Node, cond=None, reconnect=True):
        """``f_hat = tau(x, detach(h))`` with a reconnect hook on the severed edge."""
        h = self.conditioner(x, cond)
        h_hat = x.tape.detach(h, reconnect=reconnect)
        return self.transformer(x, h_hat, cond)

    def dim_derivatives(self, x, k=1, cond=None, create_graph=True, reconnect=True):
        """``f`` and ``[D_dim^1 f, ..., D_dim^k f]`` using exactly ``k`` sweeps.

        With node input the results stay on the tape; ``create_graph`` keeps
        the last derivative differentiable (required for training losses).
        """
        if k < 1:
            raise ValueError(f"derivative order must be >= 1, got {k}")
        xn, as_array, squeeze = self._as_node(x)
        tape = xn.tape
        f_hat = self.spliced(xn, cond, reconnect=reconnect)
        ones = np.ones(f_hat.shape)
        derivs = []
        current = f_hat
        for order in range(1, k + 1):
            keep = create_graph or order < k
            (current,) = tape.grad(current, [xn], cotangent=ones, create_graph=keep)
            if not isinstance(current, Node):
                current = tape.constant(current)
            derivs.append(current)
        return (self._out(f_hat, as_array, squeeze),
                [self._out(dv, as_array, squeeze) for dv in derivs])

    def dim_derivative(self, x, k=1, cond=None, create_graph=True):
        """``D_dim^k f`` evaluated with ``k`` reverse sweeps."""
        return self.dim_derivatives(x, k, cond, create_graph)[1][-1]

    def divergence(self, x, cond=None, create_graph=True):
        """Trace of the Jacobian ``sum_i [D_dim f]_i`` per batch row."""
        xn, as_array, squeeze = self._as_node(x)
        dv = self.dim_derivative(xn, 1, cond, create_graph)
        div = ag.sum_(dv, axis=-1)
        if as_array:
            return float(div.value[0]) if squeeze else div.value
        return div

    def loss_gradient(self, x, loss_fn, k=1, cond=None):
        """Gradients of ``loss_fn(f, [D^1 f..D^k f])`` for every parameter.

        The spliced graph is differentiated with reconnection, so the result
        equals backpropagation through the unspliced network.
        """
        tape = Tape()
        xn = tape.leaf(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        f, derivs = self.dim_derivatives(xn, k, cond, create_graph=True)
        loss = loss_fn(f, derivs)
        params = self.bind(tape)
        names = list(params)
        grads = tape.grad(loss, [params[n] for n in names], reconnect=True)
        return float(loss.value), dict(zip(names, grads))

    # -- reference paths ---------------------------------------------------

    def jacobian(self, x, cond=None):
        """Full Jacobian of the unspliced network by ``d`` one-hot sweeps.

        Returns shape (N, d, d) with ``J[n, i, j] = df_i/dx_j``.
        """
        return brute_force_jacobian(lambda xn: self.forward(xn, cond), x)

    def copy(self):
        return HollowNet(self.config, {k: v.copy() for k, v in self.params.items()})


def brute_force_jacobian(fn, x):
    """Jacobian of a row-wise map by one reverse sweep per output dimension."""
    arr = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tape = Tape()
    xn = tape.leaf(arr)
    out = fn(xn)
    n, d_out = out.shape
    jac = np.empty((n, d_out, arr.shape[1]))
    for i in range(d_out):
        seed = np.zeros(out.shape)
        seed[:, i] = 1.0
        (jac[:, i, :],) = tape.grad(out, [xn], cotangent=seed)
    return jac


# ---------------------------------------------------------------------------
# Checkpoints: a single .npz holding every parameter, every mask and a JSON
# metadata record.  npz keeps float64 bits untouched.


def save_checkpoint(net: HollowNet, path, extra=None):
    meta = {"config": asdict(net.config), "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in net.params.items()}
    for side, masks in net.masks.items():
        for i, m in enumerate(masks):
            arrays[f"mask/{side}/{i}"] = m
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        masks = {k: data[k] for k in data.files if k.startswith("mask/")}
    net = HollowNet(HollowConfig(**meta["config"]), params)
    for key, m in masks.items():
        _, side, i = key.split("/")
        if not np.array_equal(net.masks[side][int(i)], m):
            raise ValueError(f"checkpoint mask {key} does not match the configuration")
    return net, meta["extra"]
