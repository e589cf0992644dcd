"""Fokker-Planck matching for SDE estimation.

A time-indexed Gaussian mixture ``p(t, x)`` is fitted by maximum likelihood
while an SDE ``dx = f dt + g dW`` (diagonal ``g``) is fitted so that the
Fokker-Planck right-hand side

    sum_i [ -f_i d_i p - p (D_dim f)_i
            + 1/2 ( p d_i^2(g_i^2) + 2 d_i(g_i^2) d_i p + g_i^2 d_i^2 p ) ]

matches ``dp/dt`` at the data points.  The mixture gives ``p``, ``grad p``
and the Hessian diagonal in closed form; ``dp/dt`` comes from one reverse
sweep through the time networks.  A pseudo-maximum-likelihood fit based on
Euler transition densities serves as the baseline.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import adgraph as ag
from .adgraph import Node, Tape
from .hollownet import HollowConfig, HollowNet
from .nn import MLP, Adam

__all__ = [
    "AnnealSchedule",
    "FpTrainConfig",
    "FpTrainResult",
    "FunctionSde",
    "MixtureDensity",
    "SdeModel",
    "SdeTerms",
    "TrainingAbort",
    "TrajectoryDataset",
    "evaluate_mae",
    "fp_experiment",
    "fp_objective",
    "fp_residual",
    "fp_rhs",
    "mixture_eval",
    "ou_sde",
    "pendulum_dataset",
    "pendulum_initial_state",
    "pendulum_sde",
    "pseudo_ml_objective",
    "sample_from_density",
    "simulate_sde",
    "train_fp_matching",
    "train_pseudo_ml",
    "write_results_csv",
]

LOG_2PI = math.log(2.0 * math.pi)
G_FLOOR = 1e-6

# pendulum dataset parameters
PENDULUM_MODES = (-1.5, 1.5)
PENDULUM_MODE_STD = 0.1
PENDULUM_V_STD = 0.1
PENDULUM_G = 0.2
N_OBS = 50
OBS_DT = 0.1
EM_DT = 0.01

RESULTS_HEADER = ["method", "retention", "drift_mae", "diffusion_mae", "seed"]


class TrainingAbort(RuntimeError):
    """Non-finite loss; ``where`` holds the offending (t, x) rows if known."""

    def __init__(self, msg, where=None):
        super().__init__(msg)
        self.where = where


def _inv_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _as_node(tape, v):
    return v if isinstance(v, Node) else tape.constant(np.asarray(v, dtype=np.float64))


# ---------------------------------------------------------------------------
# Density model


class MixtureDensity:
    """``p(t, x) = sum_c pi_c(t) N(x; nu_c(t), diag(s_c(t)^2))``.

    Each of the three parameter maps is an MLP of the scalar ``t / t_scale``.
    Scales are ``softplus(.) + min_scale``.
    """

    def __init__(self, d, m=5, hidden=(32, 32, 32), activation="swish", seed=0,
                 t_scale=1.0, min_scale=1e-3):
        rng = np.random.default_rng(seed)
        self.d, self.m = int(d), int(m)
        self.t_scale = float(t_scale)
        self.min_scale = float(min_scale)
        self.weight_net = MLP((1, *hidden, m), activation, rng, prefix="mix.logit")
        self.mean_net = MLP((1, *hidden, m * d), activation, rng, prefix="mix.mean")
        self.scale_net = MLP((1, *hidden, m * d), activation, rng, prefix="mix.scale")
        self.nets = (self.weight_net, self.mean_net, self.scale_net)

    @property
    def params(self):
        out = {}
        for net in self.nets:
            out.update(net.params)
        return out

    def _last(self, net):
        n = len(net.sizes) - 2
        return net.params[f"{net.prefix}.{n}.W"], net.params[f"{net.prefix}.{n}.b"]

    def set_constant(self, weights, means, scales):
        """Make the mixture time-independent with the given parameters."""
        weights = np.asarray(weights, dtype=np.float64)
        means = np.asarray(means, dtype=np.float64).reshape(self.m, self.d)
        scales = np.asarray(scales, dtype=np.float64).reshape(self.m, self.d)
        for net, bias in ((self.weight_net, np.log(weights)),
                          (self.mean_net, means.ravel()),
                          (self.scale_net, _inv_softplus(scales.ravel() - self.min_scale))):
            w, b = self._last(net)
            w[...] = 0.0
            b[...] = bias
        return self

    def init_from_data(self, x, seed=0):
        """Start means at random data points and scales at half the data spread."""
        rng = np.random.default_rng(seed)
        x = np.asarray(x, dtype=np.float64)
        _, mb = self._last(self.mean_net)
        mb[...] = x[rng.choice(x.shape[0], self.m, replace=False)].ravel()
        _, sb = self._last(self.scale_net)
        spread = 0.5 * np.tile(x.std(axis=0), self.m)
        sb[...] = _inv_softplus(np.maximum(spread - self.min_scale, 1e-3))
        return self

    def components(self, t: Node):
        """(log pi (N, m), means (N, m, d), scales (N, m, d)) for a (N, 1) time node."""
        n = t.shape[0]
        tin = ag.mul(t, 1.0 / self.t_scale)
        log_pi = ag.log_softmax(self.weight_net(tin), axis=-1)
        mu = ag.reshape(self.mean_net(tin), (n, self.m, self.d))
        s = ag.add(ag.softplus(ag.reshape(self.scale_net(tin), (n, self.m, self.d))),
                   self.min_scale)
        return log_pi, mu, s

    def terms(self, t: Node, x: Node):
        """Log-density, density, gradient and Hessian diagonal (all nodes).

        ``x`` has shape (N, d); gradient and Hessian diagonal have shape (N, d).
        """
        n = x.shape[0]
        log_pi, mu, s = self.components(t)
        xr = ag.reshape(x, (n, 1, self.d))
        z = ag.div(ag.sub(xr, mu), s)                              # (N, m, d)
        log_n = ag.sub(ag.mul(ag.sum_(ag.square(z), axis=-1), -0.5),
                       ag.add(ag.sum_(ag.log(s), axis=-1), 0.5 * self.d * LOG_2PI))
        lc = ag.add(log_pi, log_n)                                 # (N, m)
        logp = ag.logsumexp(lc, axis=-1)
        w = ag.reshape(ag.exp(lc), (n, self.m, 1))
        p = ag.sum_(ag.exp(lc), axis=-1)
        zs = ag.div(z, s)                                          # (x - nu) / s^2
        grad = ag.sum_(ag.mul(w, ag.neg(zs)), axis=1)
        hess = ag.sum_(ag.mul(w, ag.sub(ag.square(zs), ag.reciprocal(ag.square(s)))), axis=1)
        return {"logp": logp, "p": p, "grad": grad, "hess": hess}

    def log_prob(self, t, x):
        t, x = _prepare(t, x)
        tape = Tape()
        return self.terms(tape.constant(t), tape.constant(x))["logp"].value

    def parameters_at(self, t):
        """(pi, means, scales) as arrays for the times ``t``."""
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        tape = Tape()
        log_pi, mu, s = self.components(tape.constant(t))
        return np.exp(log_pi.value), mu.value, s.value


def _prepare(t, x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (x.shape[0], 1))
    return np.ascontiguousarray(t), x


def _density_with_dt(density, tape, t_node, x_node, create_graph=True):
    terms = density.terms(t_node, x_node)
    # each p_n depends on its own t_n only, so one all-ones sweep gives dp/dt
    (dpdt,) = tape.grad(terms["p"], [t_node], cotangent=np.ones(x_node.shape[0]),
                        create_graph=create_graph)
    terms["dpdt"] = ag.reshape(dpdt, (x_node.shape[0],)) if isinstance(dpdt, Node) \
        else dpdt.reshape(-1)
    return terms


def mixture_eval(density: MixtureDensity, t, x):
    """``(p, grad_x p, diag hess_x p, dp/dt)`` as arrays."""
    for name, v in density.params.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite density parameter {name}")
    t, x = _prepare(t, x)
    tape = Tape()
    terms = _density_with_dt(density, tape, tape.leaf(t), tape.constant(x), create_graph=False)
    return terms["p"].value, terms["grad"].value, terms["hess"].value, terms["dpdt"]


def sample_from_density(density: MixtureDensity, t, n, seed=0):
    """Ancestral samples at the single time ``t``."""
    rng = np.random.default_rng(seed)
    pi, mu, s = density.parameters_at([t])
    comp = rng.choice(density.m, size=n, p=pi[0] / pi[0].sum())
    return mu[0, comp] + s[0, comp] * rng.standard_normal((n, density.d))


# ---------------------------------------------------------------------------
# SDE models


def _brute_dim(out: Node, x: Node, create_graph=True):
    """``D_dim`` of ``out`` w.r.t. ``x`` with one reverse sweep per dimension."""
    tape = x.tape
    n, d = out.shape
    total = None
    for i in range(d):
        e = np.zeros((n, d))
        e[:, i] = 1.0
        (g,) = tape.grad(out, [x], cotangent=e, create_graph=create_graph)
        term = ag.mul(g, e)
        total = term if total is None else ag.add(total, term)
    return total


@dataclass
class SdeTerms:
    f: Node
    df: Node
    g: Node
    dg: Node
    d2g: Node


class FunctionSde:
    """SDE from two tape-traceable callables ``(t, x) -> (N, d)``.

    ``drift`` and ``diffusion`` receive nodes or arrays; building them from
    :mod:`dimwise.adgraph` functions makes both paths work.  Derivatives use
    the brute-force provider.
    """

    def __init__(self, drift: Callable, diffusion: Callable, d: int, name="sde"):
        self.drift_fn, self.diffusion_fn, self.d, self.name = drift, diffusion, d, name

    def terms(self, t: Node, x: Node, create_graph=True) -> SdeTerms:
        f = _as_node(x.tape, self.drift_fn(t, x))
        g = _as_node(x.tape, self.diffusion_fn(t, x))
        if g.shape != x.shape:
            g = ag.broadcast_to(g, x.shape)
        df = _brute_dim(f, x, create_graph)
        dg = _brute_dim(g, x, True)
        d2g = _brute_dim(dg, x, create_graph)
        return SdeTerms(f, df, g, dg, d2g)

    def drift_node(self, t, x):
        return _as_node(x.tape, self.drift_fn(t, x))

    def diffusion_node(self, t, x):
        g = _as_node(x.tape, self.diffusion_fn(t, x))
        return g if g.shape == x.shape else ag.broadcast_to(g, x.shape)

    def drift_values(self, t, x):
        t, x = _prepare(t, x)
        return np.broadcast_to(np.asarray(self.drift_fn(t, x), dtype=np.float64), x.shape)

    def diffusion_values(self, t, x):
        t, x = _prepare(t, x)
        return np.broadcast_to(np.asarray(self.diffusion_fn(t, x), dtype=np.float64), x.shape)


def _col(x, i):
    return ag.slice_(x, (slice(None), slice(i, i + 1)))


def pendulum_sde():
    """``d(p, v) = (v, -2 sin p) dt + diag(0, 0.2) dW``."""

    def drift(t, x):
        return ag.concat([_col(x, 1), ag.mul(ag.sin(_col(x, 0)), -2.0)], axis=-1)

    def diffusion(t, x):
        n = x.shape[0]
        return np.tile([0.0, PENDULUM_G], (n, 1))

    return FunctionSde(drift, diffusion, 2, name="pendulum")


def ou_sde(theta=1.0, sigma=math.sqrt(2.0), d=1):
    """``dx = -theta x dt + sigma dW``; stationary law N(0, sigma^2 / (2 theta))."""
    return FunctionSde(lambda t, x: ag.mul(x, -theta),
                       lambda t, x: np.full(x.shape, sigma), d, name="ou")


def pendulum_initial_state(n, rng):
    """Position at one of two modes with small spread, velocity near zero."""
    mode = np.asarray(PENDULUM_MODES)[rng.integers(0, len(PENDULUM_MODES), n)]
    p = mode + PENDULUM_MODE_STD * rng.standard_normal(n)
    v = PENDULUM_V_STD * rng.standard_normal(n)
    return np.stack([p, v], axis=1)


class SdeModel:
    """Learned drift ``f_theta`` and positive diagonal diffusion ``g_theta``.

    ``kind="mlp"``: plain MLPs of ``(t, x)`` with brute-force ``D_dim``.
    ``kind="hollow"``: HollowNets conditioned on ``t`` with spliced ``D_dim``.
    """

    def __init__(self, d, hidden=(32, 32, 32), activation="swish", kind="mlp", seed=0,
                 t_scale=1.0):
        if kind not in ("mlp", "hollow"):
            raise ValueError(f"unknown SDE network kind '{kind}'")
        self.d, self.kind, self.t_scale = int(d), kind, float(t_scale)
        rng = np.random.default_rng(seed)
        if kind == "mlp":
            self.drift_net = MLP((1 + d, *hidden, d), activation, rng, prefix="sde.drift")
            self.diff_net = MLP((1 + d, *hidden, d), activation, rng, prefix="sde.diff")
        else:
            cfg = dict(d=d, d_h=8, cond_hidden=(hidden[0],), trans_hidden=tuple(hidden[1:]),
                       activation=activation, n_cond=1, zero_init_final=False)
            self.drift_net = HollowNet(HollowConfig(seed=seed, **cfg))
            self.diff_net = HollowNet(HollowConfig(seed=seed + 1, output_activation="softplus",
                                                   **cfg))

    @property
    def params(self):
        if self.kind == "mlp":
            return {**self.drift_net.params, **self.diff_net.params}
        return {**{f"sde.drift.{k}": v for k, v in self.drift_net.params.items()},
                **{f"sde.diff.{k}": v for k, v in self.diff_net.params.items()}}

    def _grad_names(self, tape):
        """Map param name -> bound node on ``tape`` for the optimizer."""
        if self.kind == "mlp":
            return {**self.drift_net.bind(tape), **self.diff_net.bind(tape)}
        return {**{f"sde.drift.{k}": v for k, v in self.drift_net.bind(tape).items()},
                **{f"sde.diff.{k}": v for k, v in self.diff_net.bind(tape).items()}}

    def _mlp_in(self, t, x):
        return ag.concat([ag.mul(t, 1.0 / self.t_scale), x], axis=-1)

    def terms(self, t: Node, x: Node, create_graph=True) -> SdeTerms:
        tc = ag.mul(t, 1.0 / self.t_scale)
        if self.kind == "mlp":
            inp = self._mlp_in(t, x)
            f = self.drift_net(inp)
            g = ag.add(ag.softplus(self.diff_net(inp)), G_FLOOR)
            df = _brute_dim(f, x, create_graph)
            dg = _brute_dim(g, x, True)
            d2g = _brute_dim(dg, x, create_graph)
            return SdeTerms(f, df, g, dg, d2g)
        f, (df,) = self.drift_net.dim_derivatives(x, 1, cond=tc, create_graph=create_graph)
        g, (dg, d2g) = self.diff_net.dim_derivatives(x, 2, cond=tc, create_graph=create_graph)
        return SdeTerms(f, df, ag.add(g, G_FLOOR), dg, d2g)

    def drift_node(self, t, x):
        if self.kind == "mlp":
            return self.drift_net(self._mlp_in(t, x))
        return self.drift_net.forward(x, cond=ag.mul(t, 1.0 / self.t_scale))

    def diffusion_node(self, t, x):
        if self.kind == "mlp":
            return ag.add(ag.softplus(self.diff_net(self._mlp_in(t, x))), G_FLOOR)
        return ag.add(self.diff_net.forward(x, cond=ag.mul(t, 1.0 / self.t_scale)), G_FLOOR)

    def drift_values(self, t, x):
        t, x = _prepare(t, x)
        tape = Tape()
        return self.drift_node(tape.constant(t), tape.constant(x)).value

    def diffusion_values(self, t, x):
        t, x = _prepare(t, x)
        tape = Tape()
        return self.diffusion_node(tape.constant(t), tape.constant(x)).value


# ---------------------------------------------------------------------------
# Fokker-Planck right-hand side and objectives


def _rhs_node(s: SdeTerms, dens):
    p = ag.reshape(dens["p"], (dens["p"].shape[0], 1))
    gp, hp = dens["grad"], dens["hess"]
    g2_d1 = ag.mul(ag.mul(s.g, s.dg), 2.0)                          # d_i (g_i^2)
    g2_d2 = ag.mul(ag.add(ag.square(s.dg), ag.mul(s.g, s.d2g)), 2.0)  # d_i^2 (g_i^2)
    drift_part = ag.neg(ag.add(ag.mul(s.f, gp), ag.mul(p, s.df)))
    diff_part = ag.add(ag.add(ag.mul(p, g2_d2), ag.mul(ag.mul(g2_d1, gp), 2.0)),
                       ag.mul(ag.square(s.g), hp))
    return ag.sum_(ag.add(drift_part, ag.mul(diff_part, 0.5)), axis=-1)


def fp_rhs(sde, density: MixtureDensity, t, x):
    """Fokker-Planck right-hand side at each row of ``x`` (array of shape (N,))."""
    t, x = _prepare(t, x)
    tape = Tape()
    tn, xn = tape.constant(t), tape.leaf(x)
    dens = density.terms(tn, xn)
    return _rhs_node(sde.terms(tn, xn, create_graph=False), dens).value


def fp_residual(sde, density: MixtureDensity, t, x):
    """``dp/dt - rhs`` as an array."""
    t, x = _prepare(t, x)
    tape = Tape()
    tn, xn = tape.leaf(t), tape.leaf(x)
    dens = _density_with_dt(density, tape, tn, xn, create_graph=False)
    rhs = _rhs_node(sde.terms(tn, xn, create_graph=False), dens)
    return dens["dpdt"] - rhs.value


def fp_objective(sde, density: MixtureDensity, t, x, lam=1.0):
    """Loss ``NLL(phi) + R(theta, sg phi) + lam * R(sg theta, phi)`` on a fresh tape.

    ``R`` is the mean absolute Fokker-Planck residual and ``sg`` blocks the
    gradient, so the SDE always fits the current density and the density is
    pulled towards the SDE only while ``lam > 0``.

    Returns ``(tape, loss, parts)`` with ``parts`` holding ``nll`` and ``residual``.
    """
    t, x = _prepare(t, x)
    # canonical row order: the batch is a set, so the reductions must not see its order
    order = np.lexsort(np.column_stack([t, x]).T[::-1])
    t, x = t[order], x[order]
    tape = Tape()
    tn, xn = tape.leaf(t), tape.leaf(x)
    dens = _density_with_dt(density, tape, tn, xn, create_graph=True)
    s = sde.terms(tn, xn, create_graph=True)
    nll = ag.neg(ag.mean(dens["logp"]))
    frozen_dens = {k: tape.stop_gradient(v) if isinstance(v, Node) else v
                   for k, v in dens.items()}
    r_theta = ag.mean(ag.abs_(ag.sub(frozen_dens["dpdt"], _rhs_node(s, frozen_dens))))
    loss = ag.add(nll, r_theta)
    if lam > 0:
        frozen_s = SdeTerms(*(tape.stop_gradient(v) for v in (s.f, s.df, s.g, s.dg, s.d2g)))
        r_phi = ag.mean(ag.abs_(ag.sub(dens["dpdt"], _rhs_node(frozen_s, dens))))
        loss = ag.add(loss, ag.mul(r_phi, float(lam)))
    return tape, loss, {"nll": float(nll.value), "residual": float(r_theta.value)}


def _transition_nll(sde, t0, x0, t1, x1):
    """Euler transition NLL per pair, as a node of shape (N,)."""
    dt = t1 - t0
    if np.any(dt <= 0):
        raise ValueError("observation times must strictly increase")
    tape = Tape()
    tn, xn = tape.constant(t0.reshape(-1, 1)), tape.constant(x0)
    f = sde.drift_node(tn, xn)
    g = sde.diffusion_node(tn, xn)
    dtc = dt.reshape(-1, 1)
    var = ag.mul(ag.square(g), dtc)
    resid = ag.sub(x1 - x0, ag.mul(f, dtc))
    per_dim = ag.add(ag.div(ag.square(resid), var), ag.add(ag.log(var), LOG_2PI))
    return tape, ag.mul(ag.sum_(per_dim, axis=-1), 0.5)


def pseudo_ml_objective(sde, dataset: "TrajectoryDataset"):
    """Negative log-likelihood of all retained consecutive pairs (a float)."""
    t0, x0, t1, x1 = dataset.pairs()
    _, nll = _transition_nll(sde, t0, x0, t1, x1)
    return float(np.sum(nll.value))


# ---------------------------------------------------------------------------
# Data


@dataclass
class TrajectoryDataset:
    """Observations ``x[k, j]`` at times ``t[k, j]``; ``mask`` marks retained ones."""

    t: np.ndarray
    x: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(self.t.shape, dtype=bool)
        if np.any(np.diff(self.t, axis=1) <= 0):
            raise ValueError("times within a trajectory must strictly increase")

    @property
    def n_traj(self):
        return self.t.shape[0]

    @property
    def d(self):
        return self.x.shape[-1]

    def subsample(self, retention, seed=0):
        """Keep ``max(2, round(retention * n_obs))`` random observations per trajectory."""
        if not 0 < retention <= 1:
            raise ValueError("retention must lie in (0, 1]")
        n_obs = self.t.shape[1]
        keep = max(2, int(round(retention * n_obs)))
        rng = np.random.default_rng(seed)
        mask = np.zeros_like(self.mask)
        for k in range(self.n_traj):
            mask[k, rng.choice(n_obs, keep, replace=False)] = True
        return TrajectoryDataset(self.t, self.x, mask)

    def points(self):
        return self.t[self.mask], self.x[self.mask]

    def pairs(self):
        """Consecutive retained observations ``(t0, x0, t1, x1)``."""
        t0, x0, t1, x1 = [], [], [], []
        for k in range(self.n_traj):
            idx = np.flatnonzero(self.mask[k])
            t0.append(self.t[k, idx[:-1]])
            t1.append(self.t[k, idx[1:]])
            x0.append(self.x[k, idx[:-1]])
            x1.append(self.x[k, idx[1:]])
        return (np.concatenate(t0), np.concatenate(x0), np.concatenate(t1),
                np.concatenate(x1))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["traj_id", "t"] + [f"x_{i}" for i in range(self.d)])
            for k in range(self.n_traj):
                for j in np.flatnonzero(self.mask[k]):
                    w.writerow([k, repr(float(self.t[k, j]))]
                               + [repr(float(v)) for v in self.x[k, j]])


def simulate_sde(sde, x0, n_obs=N_OBS, obs_dt=OBS_DT, dt=EM_DT, seed=0, t0=0.0):
    """Euler-Maruyama paths from the rows of ``x0``, observed every ``obs_dt``.

    The first observation is the initial state.
    """
    if dt <= 0 or obs_dt <= 0:
        raise ValueError("dt and obs_dt must be positive")
    rng = np.random.default_rng(seed)
    x = np.array(np.atleast_2d(x0), dtype=np.float64)
    n, d = x.shape
    sub = max(1, int(round(obs_dt / dt)))
    h = obs_dt / sub
    obs = np.empty((n, n_obs, d))
    times = t0 + obs_dt * np.arange(n_obs)
    obs[:, 0] = x
    t = t0
    for j in range(1, n_obs):
        for _ in range(sub):
            f = sde.drift_values(t, x)
            g = sde.diffusion_values(t, x)
            x = x + f * h + g * math.sqrt(h) * rng.standard_normal((n, d))
            t += h
        t = times[j]
        obs[:, j] = x
    return TrajectoryDataset(np.tile(times, (n, 1)), obs)


def pendulum_dataset(n_traj, seed=0, n_obs=N_OBS, obs_dt=OBS_DT, dt=EM_DT):
    rng = np.random.default_rng(seed)
    x0 = pendulum_initial_state(n_traj, rng)
    return simulate_sde(pendulum_sde(), x0, n_obs, obs_dt, dt, seed=int(rng.integers(2**31)))


def evaluate_mae(learned, truth, t, x):
    """Mean absolute drift and diffusion errors over points and dimensions."""
    t, x = _prepare(t, x)
    drift = float(np.mean(np.abs(learned.drift_values(t, x) - truth.drift_values(t, x))))
    diff = float(np.mean(np.abs(learned.diffusion_values(t, x) - truth.diffusion_values(t, x))))
    return drift, diff


# ---------------------------------------------------------------------------
# Training


@dataclass
class AnnealSchedule:
    """Linear decay from ``lambda_0`` at iteration 0 to zero at ``horizon``."""

    lambda_0: float = 1.0
    horizon: int = 1000

    def __call__(self, it):
        if self.horizon <= 0:
            return 0.0
        return self.lambda_0 * max(0.0, 1.0 - it / self.horizon)


@dataclass
class FpTrainConfig:
    iters: int = 5000
    batch_size: int = 128
    lr: float = 3e-3
    lambda_0: float = 1.0
    seed: int = 0
    log_every: int = 100


@dataclass
class FpTrainResult:
    curve: list = field(default_factory=list)   # (iter, loss, nll, residual)
    wall_time: float = 0.0


def _density_grads(tape, density):
    nodes = {}
    for net in density.nets:
        nodes.update(net.bind(tape))
    return nodes


def train_fp_matching(sde: SdeModel, density: MixtureDensity, dataset: TrajectoryDataset,
                      config: FpTrainConfig, callback=None):
    """Joint Adam on density likelihood and FP residual over retained points."""
    t_all, x_all = dataset.points()
    rng = np.random.default_rng(config.seed)
    schedule = AnnealSchedule(config.lambda_0, config.iters)
    opt = Adam(lr=config.lr)
    params = {**sde.params, **density.params}
    result = FpTrainResult()
    start = time.perf_counter()
    for it in range(config.iters):
        idx = rng.integers(0, t_all.size, config.batch_size)
        tb, xb = t_all[idx], x_all[idx]
        tape, loss, parts = fp_objective(sde, density, tb, xb, schedule(it))
        value = float(loss.value)
        if not math.isfinite(value):
            raise TrainingAbort(f"non-finite FP objective at iteration {it}",
                                where=np.column_stack([tb, xb]))
        nodes = {**sde._grad_names(tape), **_density_grads(tape, density)}
        names = list(nodes)
        grads = tape.grad(loss, [nodes[k] for k in names], reconnect=sde.kind == "hollow")
        grads = dict(zip(names, grads))
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingAbort(f"non-finite gradient at iteration {it}",
                                where=np.column_stack([tb, xb]))
        opt.step(params, grads)
        g_min = float(np.min(sde.diffusion_values(tb[:8], xb[:8])))
        if not g_min > 0:
            raise TrainingAbort(f"diffusion lost positivity at iteration {it}")
        if it % config.log_every == 0 or it == config.iters - 1:
            result.curve.append((it, value, parts["nll"], parts["residual"]))
            if callback is not None:
                callback(it, value, parts)
    result.wall_time = time.perf_counter() - start
    return result


def train_pseudo_ml(sde: SdeModel, dataset: TrajectoryDataset, config: FpTrainConfig,
                    callback=None):
    """Adam on the mean Euler transition NLL of retained consecutive pairs."""
    t0, x0, t1, x1 = dataset.pairs()
    rng = np.random.default_rng(config.seed)
    opt = Adam(lr=config.lr)
    params = sde.params
    result = FpTrainResult()
    start = time.perf_counter()
    for it in range(config.iters):
        idx = rng.integers(0, t0.size, config.batch_size)
        tape, nll = _transition_nll(sde, t0[idx], x0[idx], t1[idx], x1[idx])
        loss = ag.mean(nll)
        value = float(loss.value)
        if not math.isfinite(value):
            raise TrainingAbort(f"non-finite pseudo-likelihood at iteration {it}")
        nodes = sde._grad_names(tape)
        names = list(nodes)
        grads = dict(zip(names, tape.grad(loss, [nodes[k] for k in names],
                                          reconnect=sde.kind == "hollow")))
        opt.step(params, grads)
        if it % config.log_every == 0 or it == config.iters - 1:
            result.curve.append((it, value, value, 0.0))
            if callback is not None:
                callback(it, value, {"nll": value})
    result.wall_time = time.perf_counter() - start
    return result


# ---------------------------------------------------------------------------
# Experiment driver


def fp_experiment(retentions=(1.0, 0.2, 0.04), methods=("fp_match", "pseudo_ml"), seed=0,
                  n_traj=1000, n_eval_traj=1000, config: FpTrainConfig | None = None,
                  hidden=(32, 32, 32), m=5, kind="mlp", log=None):
    """Pendulum data, subsampling, training and MAE rows for one seed."""
    config = config or FpTrainConfig()
    truth = pendulum_sde()
    data = pendulum_dataset(n_traj, seed=seed)
    fresh = pendulum_dataset(n_eval_traj, seed=10_000 + seed)
    t_eval, x_eval = fresh.points()
    t_end = float(data.t.max())
    rows = []
    for r in retentions:
        sub = data.subsample(r, seed=seed)
        for method in methods:
            sde = SdeModel(2, hidden=hidden, kind=kind, seed=seed, t_scale=t_end)
            cfg = FpTrainConfig(**{**config.__dict__, "seed": seed})
            try:
                if method == "fp_match":
                    dens = MixtureDensity(2, m=m, hidden=hidden, seed=seed + 1, t_scale=t_end)
                    dens.init_from_data(sub.points()[1], seed=seed)
                    train_fp_matching(sde, dens, sub, cfg)
                elif method == "pseudo_ml":
                    train_pseudo_ml(sde, sub, cfg)
                else:
                    raise ValueError(f"unknown method '{method}'")
                drift, diff = evaluate_mae(sde, truth, t_eval, x_eval)
            except TrainingAbort:
                drift, diff = float("nan"), float("nan")
            row = {"method": method, "retention": r, "drift_mae": drift,
                   "diffusion_mae": diff, "seed": seed}
            rows.append(row)
            if log is not None:
                log(row)
    return rows


def write_results_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULTS_HEADER, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v)
                        for k, v in r.items()})
