"""Plain multilayer perceptrons on the tape, and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import adgraph as ag
from .adgraph import Node, Tape

__all__ = ["Adam", "MLP"]


class MLP:
    """Fully connected network ``R^n_in -> R^n_out``.

    Parameters
    ----------
    sizes : sequence of int
        Layer widths including input and output.
    activation : str
        Hidden nonlinearity, a key of :data:`dimwise.adgraph.ACTIVATIONS`.
    rng : numpy.random.Generator
        Source for the uniform fan-in initialization.
    prefix : str
        Prefix of parameter names, so several nets can share an optimizer.
    """

    def __init__(self, sizes, activation="tanh", rng=None, prefix="mlp", final_scale=1.0):
        rng = np.random.default_rng(0) if rng is None else rng
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self.prefix = prefix
        self.params = {}
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / np.sqrt(a)
            scale = final_scale if i == len(self.sizes) - 2 else 1.0
            self.params[f"{prefix}.{i}.W"] = scale * rng.uniform(-bound, bound, (a, b))
            self.params[f"{prefix}.{i}.b"] = scale * rng.uniform(-bound, bound, b)

    def bind(self, tape: Tape):
        return {k: tape.bind((id(self), k), v) for k, v in self.params.items()}

    def __call__(self, x):
        """Row-wise evaluation; arrays in, arrays out, nodes in, nodes out."""
        as_array = not isinstance(x, Node)
        if as_array:
            x = Tape().constant(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        p = self.bind(x.tape)
        act = ag.activation(self.activation)
        n = len(self.sizes) - 1
        z = x
        for i in range(n):
            z = ag.add(ag.matmul(z, p[f"{self.prefix}.{i}.W"]), p[f"{self.prefix}.{i}.b"])
            if i < n - 1:
                z = act(z)
        return z.value if as_array else z


@dataclass
class Adam:
    """Adam on a dict of arrays, updated in place."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
