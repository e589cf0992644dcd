"""Oracle-equivalence checks for HollowNet operators.

Each check returns a :class:`CheckRow`.  The suites compare against
independent oracles: brute-force Jacobians built from one-hot
vector-Jacobian products, and central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import adgraph as ag
from .adgraph import Tape
from .hollownet import HollowConfig, HollowNet, brute_force_jacobian

__all__ = ["CheckRow", "REPORT_HEADER", "corrupt_masks", "relative_error", "run_suite",
           "verify_net"]

REPORT_HEADER = ["suite", "d", "k", "max_error", "tolerance", "passed"]


@dataclass
class CheckRow:
    suite: str
    d: int
    k: int | str
    max_error: float
    tolerance: float

    @property
    def passed(self):
        return bool(np.isfinite(self.max_error) and self.max_error <= self.tolerance)

    def as_dict(self):
        return {"suite": self.suite, "d": self.d, "k": self.k,
                "max_error": repr(float(self.max_error)), "tolerance": repr(self.tolerance),
                "passed": int(self.passed)}


def relative_error(a, b, floor=1e-6):
    """Entrywise ``|a - b| / max(|a|, |b|, floor * max(max|b|, 1))``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)),
                       floor * max(float(np.max(np.abs(b), initial=0.0)), 1.0))
    return np.abs(a - b) / scale


def verify_net(d, seed=0):
    return HollowNet(HollowConfig(d=d, d_h=8, cond_hidden=(max(2 * d, 4),),
                                  trans_hidden=(16, 16), zero_init_final=False, seed=seed))


def corrupt_masks(net):
    """Negative control: fully connected conditioner masks break hollowness."""
    for side in ("fwd", "bwd"):
        net.masks[side] = [np.ones_like(m) for m in net.masks[side]]
    return net


def _hollow_invariant(net, x0):
    n, d = x0.shape

    def cond(x):
        return ag.reshape(net.conditioner(x), (n, d * net.config.d_h))

    jac = brute_force_jacobian(cond, x0).reshape(n, d, net.config.d_h, d)
    return float(max(np.max(np.abs(jac[:, i, :, i])) for i in range(d)))


def _diag_oracle(net, x0):
    return np.diagonal(net.jacobian(x0), axis1=1, axis2=2)


def _fd_of_lower(net, x0, k, eps=1e-5):
    """Central difference in ``x_i`` of the exact ``(k-1)``-th dimension-wise derivative."""
    out = np.empty_like(x0)
    for i in range(x0.shape[1]):
        e = np.zeros_like(x0)
        e[:, i] = eps
        up = net.dim_derivative(x0 + e, k - 1, create_graph=False)
        dn = net.dim_derivative(x0 - e, k - 1, create_graph=False)
        out[:, i] = (up[:, i] - dn[:, i]) / (2 * eps)
    return out


def _param_fd(net, fn, names_idx, eps=1e-6):
    out = []
    for name, idx in names_idx:
        arr = net.params[name]
        old = arr[idx]
        arr[idx] = old + eps
        up = fn()
        arr[idx] = old - eps
        dn = fn()
        arr[idx] = old
        out.append((up - dn) / (2 * eps))
    return np.array(out)


def run_suite(dims=(1, 2, 5, 10), orders=(1, 2, 3), seed=0, n_points=4, n_grad_entries=40,
              corrupt=False):
    """All checks for every ``d`` in ``dims`` and ``k`` in ``orders``."""
    rows = []
    for d in dims:
        rng = np.random.default_rng([seed, d])
        net = verify_net(d, seed=seed + d)
        if corrupt:
            corrupt_masks(net)
        x0 = rng.standard_normal((n_points, d))
        rows.append(CheckRow("hollow_invariant", d, "-", _hollow_invariant(net, x0), 0.0))

        # spliced vs ordinary backprop for a loss on f alone
        tape = Tape()
        x = tape.leaf(x0)
        params = net.bind(tape)
        names = list(params)
        plain = tape.grad(ag.sum_(ag.tanh(net.forward(x))), [params[k] for k in names])
        _, spliced = net.loss_gradient(x0, lambda f, ds: ag.sum_(ag.tanh(f)), k=1)
        err = max(float(np.max(np.abs(spliced[n] - g))) for n, g in zip(names, plain))
        rows.append(CheckRow("reconnect_equals_backprop", d, "-", err, 1e-12))

        entries = []
        for name, arr in net.params.items():
            for idx in np.ndindex(arr.shape):
                entries.append((name, idx))
        pick = rng.choice(len(entries), min(n_grad_entries, len(entries)), replace=False)
        chosen = [entries[i] for i in sorted(pick)]

        for k in orders:
            tape = Tape()
            xn = tape.leaf(x0)
            _, ds = net.dim_derivatives(xn, k, create_graph=False)
            rows.append(CheckRow("sweep_count", d, k, abs(tape.n_sweeps - k), 0.0))
            dk = ds[-1].value
            if k == 1:
                rows.append(CheckRow("splice_soundness", d, k,
                                     float(np.max(np.abs(dk - _diag_oracle(net, x0)))), 1e-10))
            else:
                rows.append(CheckRow("splice_soundness", d, k,
                                     float(np.max(relative_error(dk, _fd_of_lower(net, x0, k),
                                                                 floor=1e-3))), 1e-3))

            def loss_value(k=k):
                return float(np.sum(net.dim_derivative(x0, k, create_graph=False)))

            _, grads = net.loss_gradient(x0, lambda f, ds: ag.sum_(ds[-1]), k=k)
            ours = np.array([grads[name][idx] for name, idx in chosen])
            fd = _param_fd(net, loss_value, chosen)
            tol = 1e-5 if k == 1 else 1e-4
            rows.append(CheckRow("gradient_soundness", d, k,
                                 float(np.max(relative_error(ours, fd, floor=1e-4))), tol))
    return rows
