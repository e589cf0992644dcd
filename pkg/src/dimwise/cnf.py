"""Continuous normalizing flows with an exact, one-sweep Jacobian trace.

A sample moves along ``dx/dt = f(t, x)`` from the base distribution at
``t0`` to the data at ``t1``.  Its log-density obeys the instantaneous change
of variables ``d log p / dt = -Tr(df/dx)``.  With a HollowNet the trace is
``sum_i [D_dim f]_i``, one reverse sweep; the Hutchinson estimator
``v^T (df/dx) v`` is the stochastic baseline.

Sign convention used throughout: integrating the augmented state
``(x, a)`` with ``da/dt = -Tr`` from ``t1`` back to ``t0`` starting at
``a(t1) = 0`` gives ``log p_t1(x) = log p_base(x(t0)) - a(t0)``.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import adgraph as ag
from .adgraph import Node, Tape
from .hollownet import HollowConfig, HollowNet
from .nn import Adam
from .odesolve import OdeProblem, SolverConfig, rk45_adaptive

__all__ = [
    "AugmentedState",
    "CnfModel",
    "TraceEstimator",
    "TrainConfig",
    "TrainingDivergence",
    "augmented_dynamics",
    "base_log_prob",
    "log_density",
    "make_dataset",
    "sample",
    "train_mle",
]

LOG_2PI = math.log(2.0 * math.pi)
DATASETS = ("ring8", "moons", "gauss")


class TrainingDivergence(RuntimeError):
    pass


def base_log_prob(x):
    """Standard normal log-density, row-wise."""
    x = np.atleast_2d(x)
    return -0.5 * (np.sum(x * x, axis=-1) + x.shape[-1] * LOG_2PI)


def _base_log_prob_node(x: Node):
    d = x.shape[-1]
    return ag.mul(ag.add(ag.sum_(ag.square(x), axis=-1), d * LOG_2PI), -0.5)


@dataclass
class CnfModel:
    """Time-conditioned HollowNet dynamics on ``t_span`` with a standard normal base."""

    dynamics: HollowNet
    t_span: tuple = (0.0, 1.0)

    @classmethod
    def create(cls, d, d_h=8, cond_hidden=(32,), trans_hidden=(32, 32), activation="tanh",
               seed=0, t_span=(0.0, 1.0)):
        net = HollowNet(HollowConfig(d=d, d_h=d_h, cond_hidden=cond_hidden,
                                     trans_hidden=trans_hidden, activation=activation,
                                     n_cond=1, seed=seed))
        return cls(net, t_span)

    @property
    def d(self):
        return self.dynamics.d


@dataclass
class AugmentedState:
    x: np.ndarray
    logp_delta: np.ndarray

    def flat(self):
        return np.concatenate([self.x, self.logp_delta[:, None]], axis=1).ravel()

    @classmethod
    def unflat(cls, z, d):
        z = z.reshape(-1, d + 1)
        return cls(z[:, :d], z[:, d])


@dataclass
class TraceEstimator:
    """``mode`` is ``exact``, ``hutchinson`` or ``brute_force`` (d-sweep oracle)."""

    mode: str = "exact"
    n_probes: int = 1
    probe_dist: str = "rademacher"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("exact", "hutchinson", "brute_force"):
            raise ValueError(f"unknown trace mode '{self.mode}'")
        if self.mode == "hutchinson" and self.n_probes < 1:
            raise ValueError("n_probes must be >= 1")
        if self.probe_dist not in ("rademacher", "gaussian"):
            raise ValueError(f"unknown probe distribution '{self.probe_dist}'")
        self.rng = np.random.default_rng(self.seed)

    def probes(self, shape):
        if self.probe_dist == "rademacher":
            return self.rng.integers(0, 2, size=shape) * 2.0 - 1.0
        return self.rng.standard_normal(shape)


def _f_and_trace(model, estimator, t, x, create_graph=False):
    """(f, trace) for node input ``x`` of shape (N, d)."""
    net = model.dynamics
    tape = x.tape
    if estimator.mode == "exact":
        f, (dv,) = net.dim_derivatives(x, 1, cond=t, create_graph=create_graph)
        return f, ag.sum_(dv, axis=-1) if isinstance(dv, Node) else dv.sum(-1)
    f = net.forward(x, cond=t)
    if estimator.mode == "brute_force":
        tr = 0.0
        for i in range(x.shape[1]):
            seed = np.zeros(f.shape)
            seed[:, i] = 1.0
            (g,) = tape.grad(f, [x], cotangent=seed, create_graph=create_graph)
            tr = ag.add(tr, ag.slice_(g, (slice(None), i))) if isinstance(g, Node) \
                else tr + g[:, i]
        return f, tr
    total = 0.0
    for _ in range(estimator.n_probes):
        v = estimator.probes(f.shape)
        (vj,) = tape.grad(f, [x], cotangent=v, create_graph=create_graph)
        term = ag.sum_(ag.mul(vj, v), axis=-1) if isinstance(vj, Node) else np.sum(vj * v, -1)
        total = ag.add(total, term) if isinstance(term, Node) else total + term
    if isinstance(total, Node):
        return f, ag.mul(total, 1.0 / estimator.n_probes)
    return f, total / estimator.n_probes


def augmented_dynamics(model: CnfModel, estimator: TraceEstimator, t, state: AugmentedState):
    """``(f(t, x), -trace)`` evaluated on arrays."""
    tape = Tape()
    x = tape.leaf(np.atleast_2d(state.x))
    f, tr = _f_and_trace(model, estimator, t, x)
    f = f.value if isinstance(f, Node) else f
    tr = tr.value if isinstance(tr, Node) else np.asarray(tr)
    return AugmentedState(f, -tr)


def _augmented_problem(model, estimator, x, t_from, t_to):
    d = model.d

    def rhs(t, z):
        s = augmented_dynamics(model, estimator, t, AugmentedState.unflat(z, d))
        return s.flat()

    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z0 = AugmentedState(x, np.zeros(x.shape[0])).flat()
    return OdeProblem(rhs, (t_from, t_to), z0, name="cnf")


def _rk4(fn, t0, t1, z, n_steps):
    h = (t1 - t0) / n_steps
    t = t0
    for _ in range(n_steps):
        k1 = fn(t, z)
        k2 = fn(t + h / 2, z + (h / 2) * k1)
        k3 = fn(t + h / 2, z + (h / 2) * k2)
        k4 = fn(t + h, z + h * k3)
        z = z + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return z


def log_density(model: CnfModel, x, estimator=None, solver_config=None, n_steps=None):
    """Log-density at ``t1`` of each row of ``x``.

    Uses Dormand-Prince with ``solver_config`` (default rtol=atol=1e-6), or
    fixed-step RK4 with ``n_steps`` steps when given.
    """
    estimator = estimator or TraceEstimator("exact")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t0, t1 = model.t_span
    prob = _augmented_problem(model, estimator, x, t1, t0)
    if n_steps is not None:
        z = _rk4(prob.dynamics, t1, t0, prob.y0, n_steps)
    else:
        cfg = solver_config or SolverConfig(rtol=1e-6, atol=1e-6)
        z = rk45_adaptive(prob, cfg).y_final
    s = AugmentedState.unflat(z, model.d)
    return base_log_prob(s.x) - s.logp_delta


def sample(model: CnfModel, n, seed=0, solver_config=None, n_steps=None):
    """Base draws pushed from ``t0`` to ``t1``."""
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((n, model.d))
    t0, t1 = model.t_span
    net = model.dynamics

    def rhs(t, z):
        return net.forward(z.reshape(n, -1), cond=t).ravel()

    if n_steps is not None:
        return _rk4(rhs, t0, t1, x0.ravel(), n_steps).reshape(n, -1)
    cfg = solver_config or SolverConfig(rtol=1e-6, atol=1e-6)
    return rk45_adaptive(OdeProblem(rhs, (t0, t1), x0.ravel()), cfg).y_final.reshape(n, -1)


# ---------------------------------------------------------------------------
# Datasets


def make_dataset(name, n, seed=0):
    """Seeded toy samples: ``ring8``, ``moons`` (2-D) or ``gauss`` (standard normal, 2-D)."""
    rng = np.random.default_rng(seed)
    if name == "ring8":
        k = rng.integers(0, 8, n)
        angle = 2 * np.pi * k / 8
        centers = 2.0 * np.stack([np.cos(angle), np.sin(angle)], axis=1)
        return centers + 0.25 * rng.standard_normal((n, 2))
    if name == "moons":
        u = rng.uniform(0, np.pi, n)
        upper = rng.random(n) < 0.5
        x = np.where(upper, np.cos(u), 1.0 - np.cos(u))
        y = np.where(upper, np.sin(u), 0.5 - np.sin(u))
        pts = np.stack([x - 0.5, y - 0.25], axis=1) * 2.0
        return pts + 0.1 * rng.standard_normal((n, 2))
    if name == "gauss":
        return rng.standard_normal((n, 2))
    raise ValueError(f"unknown dataset '{name}', expected one of {DATASETS}")


def gaussian_fit_nll(data):
    """Mean NLL of the maximum-likelihood single Gaussian (closed form)."""
    data = np.atleast_2d(data)
    d = data.shape[1]
    cov = np.atleast_2d(np.cov(data, rowvar=False, bias=True))
    return 0.5 * (d * (1.0 + LOG_2PI) + np.linalg.slogdet(cov)[1])


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    iters: int = 2000
    batch_size: int = 64
    lr: float = 5e-3
    n_steps: int = 20
    eval_every: int = 50
    eval_size: int = 512
    data_seed: int = 0
    stop_below: float | None = None  # stop once eval NLL reaches this value


@dataclass
class TrainResult:
    curve: list = field(default_factory=list)       # (iter, nll, nfe)
    eval_curve: list = field(default_factory=list)  # (iter, eval_nll)
    wall_time: float = 0.0
    stopped_at: int | None = None

    def first_reaching(self, threshold):
        for it, v in self.eval_curve:
            if v <= threshold:
                return it
        return None


def _batch_loss(model, estimator, x_batch, n_steps):
    """Mean NLL through an unrolled RK4 solve recorded on a fresh tape."""
    tape = Tape()
    x = tape.constant(x_batch)
    t0, t1 = model.t_span
    h = (t0 - t1) / n_steps

    def dyn(t, z):
        f, tr = _f_and_trace(model, estimator, t, z, create_graph=True)
        return f, ag.neg(tr)

    z = x
    a = tape.constant(np.zeros(x_batch.shape[0]))
    t = t1
    for _ in range(n_steps):
        k1, l1 = dyn(t, z)
        k2, l2 = dyn(t + h / 2, ag.add(z, ag.mul(k1, h / 2)))
        k3, l3 = dyn(t + h / 2, ag.add(z, ag.mul(k2, h / 2)))
        k4, l4 = dyn(t + h, ag.add(z, ag.mul(k3, h)))
        z = ag.add(z, ag.mul(ag.add(ag.add(k1, k4), ag.mul(ag.add(k2, k3), 2.0)), h / 6))
        a = ag.add(a, ag.mul(ag.add(ag.add(l1, l4), ag.mul(ag.add(l2, l3), 2.0)), h / 6))
        t += h
    logp = ag.sub(_base_log_prob_node(z), a)
    return tape, ag.neg(ag.mean(logp))


def train_mle(model: CnfModel, data, estimator: TraceEstimator, config: TrainConfig,
              eval_data=None, callback=None):
    """Adam on the mean NLL of minibatches, backpropagating through RK4.

    ``eval_data`` (default: a fixed slice of ``data``) is scored every
    ``config.eval_every`` iterations with the exact trace and the same RK4
    discretization, so exact and stochastic runs are compared on equal terms.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    rng = np.random.default_rng(config.data_seed)
    if eval_data is None:
        eval_data = data[: config.eval_size]
    exact = TraceEstimator("exact")
    opt = Adam(lr=config.lr)
    net = model.dynamics
    result = TrainResult()
    nfe_per_iter = 4 * config.n_steps
    start = time.perf_counter()

    def evaluate(it):
        v = -float(np.mean(log_density(model, eval_data, exact, n_steps=config.n_steps)))
        result.eval_curve.append((it, v))
        return v

    evaluate(0)
    for it in range(1, config.iters + 1):
        idx = rng.integers(0, data.shape[0], config.batch_size)
        tape, loss = _batch_loss(model, estimator, data[idx], config.n_steps)
        value = float(loss.value)
        if not math.isfinite(value):
            raise TrainingDivergence(f"non-finite loss {value} at iteration {it}")
        params = net.bind(tape)
        names = list(params)
        grads = tape.grad(loss, [params[k] for k in names], reconnect=True)
        grads = dict(zip(names, grads))
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDivergence(f"non-finite gradient at iteration {it}")
        opt.step(net.params, grads)
        result.curve.append((it, value, nfe_per_iter))
        if it % config.eval_every == 0 or it == config.iters:
            v = evaluate(it)
            if callback is not None:
                callback(it, value, v)
            if config.stop_below is not None and v <= config.stop_below:
                result.stopped_at = it
                break
    result.wall_time = time.perf_counter() - start
    return result


# ---------------------------------------------------------------------------
# Outputs


def write_curve(path, result: TrainResult):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "nll", "nfe"])
        for it, nll, nfe in result.curve:
            w.writerow([it, repr(nll), nfe])


def write_eval_curve(path, result: TrainResult):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "eval_nll"])
        for it, v in result.eval_curve:
            w.writerow([it, repr(v)])


def density_grid(model, lo=-4.0, hi=4.0, n=60, solver_config=None):
    """Log-density on an ``n`` x ``n`` grid (2-D) or ``n`` points (1-D).

    Returns (points, logp, cell_area).
    """
    axis = np.linspace(lo, hi, n)
    if model.d == 1:
        pts = axis[:, None]
        cell = axis[1] - axis[0]
    elif model.d == 2:
        gx, gy = np.meshgrid(axis, axis, indexing="xy")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        cell = (axis[1] - axis[0]) ** 2
    else:
        raise ValueError("density grids are only defined for d <= 2")
    cfg = solver_config or SolverConfig(rtol=1e-5, atol=1e-5)
    return pts, log_density(model, pts, TraceEstimator("exact"), cfg), cell


def grid_mass(points, logp, lo, hi, n):
    """Trapezoidal integral of ``exp(logp)`` over the grid box."""
    p = np.exp(logp)
    axis = np.linspace(lo, hi, n)
    if points.shape[1] == 1:
        return float(np.trapezoid(p, axis))
    grid = p.reshape(n, n)
    return float(np.trapezoid(np.trapezoid(grid, axis, axis=1), axis))


def write_density_grid(path, points, logp):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["x", "y"][: points.shape[1]] + ["logp"]
        w.writerow(cols)
        for pt, lp in zip(points, logp):
            w.writerow([repr(float(v)) for v in pt] + [repr(float(lp))])
