"""ODE solvers: adaptive Dormand-Prince and Adams-Bashforth-Moulton.

The implicit Adams-Moulton corrector leads, at every step, to the root-finding
problem ``F(y) = y - h*b_s*f(y) - delta = 0``.  Three solvers are provided:

* functional iteration (Jacobian approximated by the identity),
* Jacobi-Newton (Jacobian approximated by its diagonal, ``1 - h*b_s*D_dim f``),
* full Newton (dense Jacobian; only sensible for small ``d``).

Jacobi-Newton costs one evaluation of ``f`` plus one of ``D_dim f`` per
iteration, which for a HollowNet is a single extra reverse sweep.

Iteration counting: an iteration evaluates ``F`` at the current iterate and
forms the update.  The evaluation whose update already satisfies the stopping
rule certifies convergence and is not counted as a corrective iteration; at
least one iteration is always reported.  NFE counts every evaluation.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "CorrectorResult",
    "ImplicitResidual",
    "OdeProblem",
    "SolverConfig",
    "StepStats",
    "Trajectory",
    "abm_solve",
    "adams_coefficients",
    "functional_iteration",
    "jacobi_newton",
    "newton_full",
    "rk45_adaptive",
]


class SolverError(RuntimeError):
    def __init__(self, msg, stats=None):
        super().__init__(msg)
        self.stats = stats


class StiffnessError(SolverError):
    """Step size fell below ``h_min``."""


class CorrectorFailure(SolverError):
    """The corrector did not converge and the step could not be retried."""


class SingularDiagonalError(ArithmeticError):
    pass


class SingularJacobianError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# Problem, configuration and accounting


@dataclass
class OdeProblem:
    """``y' = dynamics(t, y)`` on ``t_span`` from ``y0``.

    ``dim_derivative(t, y)`` and ``jacobian(t, y)`` are optional cheap
    providers of the Jacobian diagonal and the full Jacobian.  When
    ``f_and_dim_derivative(t, y)`` is given it is preferred by Jacobi-Newton,
    since a HollowNet obtains both from one forward pass.
    """

    dynamics: Callable
    t_span: tuple
    y0: np.ndarray
    dim_derivative: Callable | None = None
    jacobian: Callable | None = None
    f_and_dim_derivative: Callable | None = None
    name: str = "problem"

    def __post_init__(self):
        self.y0 = np.atleast_1d(np.asarray(self.y0, dtype=np.float64))
        self.t_span = (float(self.t_span[0]), float(self.t_span[1]))

    @property
    def d(self):
        return self.y0.size


CORRECTORS = ("functional", "jacobi_newton", "full_newton")


@dataclass
class SolverConfig:
    rtol: float = 1e-6
    atol: float = 1e-6
    tau_a: float | None = None
    tau_r: float | None = None
    max_corrector_iters: int = 4
    h_init: float | None = None
    h_min: float = 1e-12
    h_max: float = math.inf
    corrector: str = "jacobi_newton"
    fixed_step: bool = False
    warmup_tol_factor: float = 1e-2
    max_steps: int = 1_000_000

    def __post_init__(self):
        if self.tau_a is None:
            self.tau_a = 0.1 * self.atol
        if self.tau_r is None:
            self.tau_r = 0.1 * self.rtol
        for name in ("rtol", "atol", "tau_a", "tau_r", "h_min", "h_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.corrector not in CORRECTORS:
            raise ValueError(f"corrector must be one of {CORRECTORS}")
        if self.max_corrector_iters < 1:
            raise ValueError("max_corrector_iters must be >= 1")
        if self.h_init is not None and not (self.h_min <= self.h_init <= self.h_max):
            raise ValueError("need h_min <= h_init <= h_max")
        if self.fixed_step and self.h_init is None:
            raise ValueError("fixed_step requires h_init")


@dataclass
class StepStats:
    nfe: int = 0
    n_dim_derivative_calls: int = 0
    n_jacobian_calls: int = 0
    n_steps_accepted: int = 0
    n_steps_rejected: int = 0
    n_corrector_failures: int = 0
    corrector_iters_histogram: Counter = field(default_factory=Counter)
    accepted_corrector_iters: list = field(default_factory=list)

    @property
    def corrector_iters_total(self):
        return int(sum(k * v for k, v in self.corrector_iters_histogram.items()))

    def row(self, solver):
        return {
            "solver": solver,
            "nfe": self.nfe,
            "steps_accepted": self.n_steps_accepted,
            "steps_rejected": self.n_steps_rejected,
            "corrector_iters_total": self.corrector_iters_total,
        }


STATS_HEADER = ["solver", "nfe", "steps_accepted", "steps_rejected", "corrector_iters_total"]


@dataclass
class Trajectory:
    t: np.ndarray
    y: np.ndarray
    stats: StepStats
    solver: str

    @property
    def y_final(self):
        return self.y[-1]

    def write_csv(self, path):
        d = self.y.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"y_{i}" for i in range(d)])
            for t, y in zip(self.t, self.y):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in y])


def write_stats_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=STATS_HEADER, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


class _Counted:
    """Problem wrapper that counts every provider call into ``stats``."""

    def __init__(self, problem: OdeProblem, stats: StepStats):
        self.p = problem
        self.stats = stats

    def f(self, t, y):
        self.stats.nfe += 1
        return np.asarray(self.p.dynamics(t, y), dtype=np.float64)

    def f_and_diag(self, t, y):
        if self.p.f_and_dim_derivative is not None:
            self.stats.nfe += 1
            self.stats.n_dim_derivative_calls += 1
            f, dv = self.p.f_and_dim_derivative(t, y)
            return np.asarray(f, dtype=np.float64), np.asarray(dv, dtype=np.float64)
        f = self.f(t, y)
        if self.p.dim_derivative is not None:
            self.stats.n_dim_derivative_calls += 1
            return f, np.asarray(self.p.dim_derivative(t, y), dtype=np.float64)
        # forward differences, each probe is a dynamics evaluation
        diag = np.empty_like(y)
        for i in range(y.size):
            eps = math.sqrt(np.finfo(float).eps) * max(1.0, abs(y[i]))
            yp = y.copy()
            yp[i] += eps
            diag[i] = (self.f(t, yp)[i] - f[i]) / eps
        return f, diag

    def jac(self, t, y, f=None):
        if self.p.jacobian is not None:
            self.stats.n_jacobian_calls += 1
            return np.asarray(self.p.jacobian(t, y), dtype=np.float64)
        if f is None:
            f = self.f(t, y)
        jac = np.empty((y.size, y.size))
        for i in range(y.size):
            eps = math.sqrt(np.finfo(float).eps) * max(1.0, abs(y[i]))
            yp = y.copy()
            yp[i] += eps
            jac[:, i] = (self.f(t, yp) - f) / eps
        return jac


# ---------------------------------------------------------------------------
# Corrector iterations


@dataclass
class ImplicitResidual:
    """``F(y) = y - hb * f(y) - delta`` with optional derivative providers."""

    f: Callable
    hb: float
    delta: np.ndarray
    f_and_dim_derivative: Callable | None = None
    jacobian: Callable | None = None

    def __call__(self, y):
        return y - self.hb * self.f(y) - self.delta


@dataclass
class CorrectorResult:
    y: np.ndarray
    f: np.ndarray
    iterations: int
    converged: bool
    n_evals: int
    residual_inf: float
    rate: float = 0.0


def _norm(v):
    return float(np.linalg.norm(v) / math.sqrt(v.size))


def _iterate(step, y_init, tau_a, tau_r, max_iters):
    """Shared driver; ``step(y) -> (f(y), F(y), update)``.

    Stops early, unconverged, once an update is larger than its predecessor.
    """
    y = np.array(y_init, dtype=np.float64)
    tol = tau_a + tau_r * float(np.max(np.abs(y_init)))
    updates = 0
    n_evals = 0
    prev = math.inf
    rate = 0.0
    while True:
        fy, res, update = step(y)
        n_evals += 1
        if not (np.all(np.isfinite(update)) and np.all(np.isfinite(fy))):
            return CorrectorResult(y, fy, max(updates, 1), False, n_evals, math.inf, math.inf)
        size = _norm(update)
        if updates:
            rate = size / prev if prev > 0 else 0.0
        if size <= tol:
            return CorrectorResult(y, fy, max(updates, 1), True, n_evals,
                                   float(np.max(np.abs(res))), rate)
        if updates == max_iters or size >= prev:
            return CorrectorResult(y, fy, max(updates, 1), False, n_evals,
                                   float(np.max(np.abs(res))), rate)
        y = y - update
        prev = size
        updates += 1


def functional_iteration(residual: ImplicitResidual, y_init, tau_a, tau_r, max_iters=4):
    """``y <- hb * f(y) + delta`` until the update is below tolerance."""

    def step(y):
        fy = residual.f(y)
        res = y - residual.hb * fy - residual.delta
        return fy, res, res

    return _iterate(step, y_init, tau_a, tau_r, max_iters)


def jacobi_newton(residual: ImplicitResidual, y_init, tau_a, tau_r, max_iters=4):
    """``y <- y - F(y) / (1 - hb * D_dim f(y))`` (elementwise)."""
    provider = residual.f_and_dim_derivative
    if provider is None:
        raise ValueError("jacobi_newton needs a dimension-wise derivative provider")

    def step(y):
        fy, diag = provider(y)
        res = y - residual.hb * fy - residual.delta
        den = 1.0 - residual.hb * diag
        if np.any(np.abs(den) < 1e-12):
            raise SingularDiagonalError("1 - h*b_s*D_dim f has a zero entry")
        return fy, res, res / den

    return _iterate(step, y_init, tau_a, tau_r, max_iters)


def newton_full(residual: ImplicitResidual, y_init, tau_a, tau_r, max_iters=4):
    """Newton-Raphson with the dense Jacobian ``I - hb * df/dy``."""
    if residual.jacobian is None:
        raise ValueError("newton_full needs a Jacobian provider")

    def step(y):
        fy = residual.f(y)
        res = y - residual.hb * fy - residual.delta
        jac_f = residual.jacobian(y, fy)
        jac = np.eye(y.size) - residual.hb * jac_f
        try:
            update = np.linalg.solve(jac, res)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobianError(str(exc)) from None
        if np.linalg.cond(jac) > 1e14:
            raise SingularJacobianError("Newton Jacobian is numerically singular")
        return fy, res, update

    return _iterate(step, y_init, tau_a, tau_r, max_iters)


_CORRECTOR_FNS = {
    "functional": functional_iteration,
    "jacobi_newton": jacobi_newton,
    "full_newton": newton_full,
}


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_BHAT = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
                     187 / 2100, 1 / 40])
_DP_E = _DP_B - _DP_BHAT


def _dp_step(fn, t, y, f0, h):
    """One Dormand-Prince step; returns (y_new, f_new, error_vector)."""
    k = [f0]
    for i in range(1, 7):
        yi = y + h * sum(a * kj for a, kj in zip(_DP_A[i], k))
        k.append(fn(t + _DP_C[i] * h, yi))
        if i == 6:
            y_new = yi  # row 7 of A equals b (FSAL)
    err = h * sum(e * kj for e, kj in zip(_DP_E, k))
    return y_new, k[6], err


def _err_norm(err, y0, y1, atol, rtol):
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.max(np.abs(err) / scale)) if err.size else 0.0


def _initial_step(fn, t0, y0, f0, direction, rtol, atol, order=5):
    scale = atol + rtol * np.abs(y0)
    d0 = _norm(y0 / scale)
    d1 = _norm(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + direction * h0 * f0
    f1 = fn(t0 + direction * h0, y1)
    d2 = _norm((f1 - f0) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        # locally constant solution: let the error test find the step
        return math.inf
    h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return min(100 * h0, h1)


def _rk45_core(fn, t0, t1, y0, rtol, atol, h_init, h_min, h_max, stats, max_steps,
               record=True, max_accepted=None):
    direction = 1.0 if t1 >= t0 else -1.0
    t, y = t0, np.array(y0, dtype=np.float64)
    f = fn(t, y)
    if h_init is None:
        h = _initial_step(fn, t, y, f, direction, rtol, atol)
    else:
        h = h_init
    h = min(h, h_max)
    ts, ys, fs = [t], [y.copy()], [f]
    n_accepted = 0
    for _ in range(max_steps):
        remaining = (t1 - t) * direction
        if remaining <= 1e-14 * max(1.0, abs(t1)):
            break
        if max_accepted is not None and n_accepted >= max_accepted:
            break
        h = min(h, remaining)
        if h < h_min:
            raise StiffnessError(f"step size {h:.3e} below h_min at t={t:.6g}", stats)
        y_new, f_new, err = _dp_step(fn, t, y, f, direction * h)
        en = _err_norm(err, y, y_new, atol, rtol)
        if en <= 1.0 and np.all(np.isfinite(y_new)):
            final = h >= remaining
            t = t1 if final else t + direction * h
            y, f = y_new, f_new
            stats.n_steps_accepted += 1
            n_accepted += 1
            if record:
                ts.append(t)
                ys.append(y.copy())
                fs.append(f)
            factor = 10.0 if en == 0 else min(10.0, max(0.2, 0.9 * en ** -0.2))
            h = min(h * factor, h_max)
        else:
            stats.n_steps_rejected += 1
            factor = 0.2 if not np.isfinite(en) else min(1.0, max(0.2, 0.9 * en ** -0.2))
            h = h * factor
    else:
        raise SolverError("max_steps exceeded", stats)
    return np.array(ts), np.array(ys), fs, h


def rk45_adaptive(problem: OdeProblem, config: SolverConfig | None = None):
    """Dormand-Prince 5(4) with error-per-step control.

    A step is accepted when ``max_i |err_i| / (atol + rtol * max(|y_i|, |y_new_i|)) <= 1``;
    the next step is scaled by ``0.9 * err**(-1/5)`` clipped to [0.2, 10].
    """
    config = config or SolverConfig()
    stats = StepStats()
    fn = _Counted(problem, stats).f
    t0, t1 = problem.t_span
    ts, ys, _, _ = _rk45_core(fn, t0, t1, problem.y0, config.rtol, config.atol, config.h_init,
                              config.h_min, config.h_max, stats, config.max_steps)
    return Trajectory(ts, ys, stats, "rk45")


# ---------------------------------------------------------------------------
# Adams-Bashforth-Moulton

ORDER = 4
_GL_X, _GL_W = np.polynomial.legendre.leggauss(3)


def adams_coefficients(nodes, t_n, h):
    """Weights ``w_j`` with ``int_{t_n}^{t_n+h} P(t) dt = h * sum_j w_j P(nodes_j)``.

    ``P`` is any polynomial of degree ``len(nodes) - 1``.  On an equal grid
    these are the classical Adams-Bashforth (nodes ``t_n, t_n - h, ...``) or
    Adams-Moulton (nodes ``t_n + h, t_n, ...``) coefficients.
    """
    nodes = np.asarray(nodes, dtype=np.float64)
    tq = t_n + 0.5 * h * (_GL_X + 1.0)
    wq = 0.5 * _GL_W
    weights = np.empty(nodes.size)
    for j in range(nodes.size):
        others = np.delete(nodes, j)
        basis = np.prod((tq[:, None] - others[None, :]) / (nodes[j] - others[None, :]), axis=1)
        weights[j] = np.dot(wq, basis)
    return weights


@dataclass
class MultistepState:
    """Last ``ORDER`` accepted points, newest first.

    ``a`` holds the state coefficients of the linear multistep form (for
    Adams methods only ``y_n`` enters), ``b`` the derivative coefficients of
    the current corrector, ``b[0]`` multiplying the implicit ``f(t_{n+1})``.
    """

    t: list
    y: list
    f: list
    a: np.ndarray = field(default_factory=lambda: np.r_[-1.0, np.zeros(ORDER - 2)])
    b: np.ndarray = field(default_factory=lambda: np.zeros(ORDER))

    def push(self, t, y, f):
        if t <= self.t[0]:
            raise ValueError("history times must increase")
        self.t = [t] + self.t[:ORDER - 1]
        self.y = [y] + self.y[:ORDER - 1]
        self.f = [f] + self.f[:ORDER - 1]


# Milne's device for the AB4/AM4 pair: LTE(corrector) ~ 19/270 (y_c - y_p)
_MILNE = 19.0 / 270.0
# after a corrector failure the step is capped, and the cap relaxes slowly
_CAP_RELAX = 1.1


def abm_solve(problem: OdeProblem, config: SolverConfig | None = None):
    """AB4 predictor + AM4 corrector solved by the configured iteration.

    The three starting values come from Dormand-Prince at a tightened
    tolerance.  Variable step sizes use exact variable-node Adams weights.
    In adaptive mode a corrector that fails within ``max_corrector_iters``
    rejects the step and halves ``h``; in fixed-step mode it is an error.
    """
    config = config or SolverConfig()
    stats = StepStats()
    counted = _Counted(problem, stats)
    corrector = _CORRECTOR_FNS[config.corrector]
    t0, t1 = problem.t_span
    direction = 1.0 if t1 >= t0 else -1.0
    if config.fixed_step and ORDER * config.h_init > abs(t1 - t0):
        raise ValueError("t_span too short for the fixed step and the starting procedure")

    y0 = problem.y0.copy()
    tight_r = config.rtol * config.warmup_tol_factor
    tight_a = config.atol * config.warmup_tol_factor
    if config.fixed_step:
        # starting values on the equal grid of spacing h
        h = config.h_init
        f0 = counted.f(t0, y0)
        state = MultistepState([t0], [y0], [f0])
        t, y = t0, y0
        for _ in range(ORDER - 1):
            t_next = t + direction * h
            _, sub_y, sub_f, _ = _rk45_core(counted.f, t, t_next, y, tight_r, tight_a, None,
                                            config.h_min, config.h_max, StepStats(),
                                            config.max_steps)
            t, y = t_next, sub_y[-1]
            state.push(t, y, sub_f[-1])
    else:
        # starting values wherever Dormand-Prince lands; Adams weights cope with the uneven grid
        sub_t, sub_y, sub_f, h = _rk45_core(counted.f, t0, t1, y0, tight_r, tight_a,
                                            config.h_init, config.h_min, config.h_max,
                                            StepStats(), config.max_steps,
                                            max_accepted=ORDER - 1)
        state = MultistepState([sub_t[0]], [sub_y[0]], [sub_f[0]])
        for tj, yj, fj in zip(sub_t[1:], sub_y[1:], sub_f[1:]):
            state.push(tj, yj, fj)
        t, y = state.t[0], state.y[0]
    h_cap = math.inf
    ts = list(reversed(state.t))
    ys = [v.copy() for v in reversed(state.y)]
    stats.n_steps_accepted += len(ts) - 1

    for _ in range(config.max_steps):
        remaining = (t1 - t) * direction
        if remaining <= 1e-14 * max(1.0, abs(t1)):
            break
        final = h >= remaining
        h_step = remaining if final else h
        if h_step < config.h_min and not final:
            raise StiffnessError(f"step size {h_step:.3e} below h_min at t={t:.6g}", stats)
        t_new = t + direction * h_step
        hs = direction * h_step

        beta = adams_coefficients(state.t, t, hs)
        y_pred = y + hs * sum(b * fj for b, fj in zip(beta, state.f))
        am = adams_coefficients([t_new] + state.t[:ORDER - 1], t, hs)
        state.b = am
        delta = y + hs * sum(b * fj for b, fj in zip(am[1:], state.f[:ORDER - 1]))
        residual = ImplicitResidual(
            f=lambda v, _t=t_new: counted.f(_t, v),
            hb=hs * am[0],
            delta=delta,
            f_and_dim_derivative=lambda v, _t=t_new: counted.f_and_diag(_t, v),
            jacobian=lambda v, fv=None, _t=t_new: counted.jac(_t, v, fv),
        )
        try:
            result = corrector(residual, y_pred, config.tau_a, config.tau_r,
                               config.max_corrector_iters)
        except (SingularDiagonalError, SingularJacobianError):
            if config.fixed_step:
                raise
            result = None
        if result is None or not result.converged:
            stats.n_corrector_failures += 1
            if config.fixed_step:
                raise CorrectorFailure(
                    f"corrector '{config.corrector}' did not converge at t={t_new:.6g}", stats)
            stats.n_steps_rejected += 1
            h = 0.5 * h_step
            h_cap = h
            continue

        y_new, f_new = result.y, result.f
        if config.fixed_step:
            en = 0.0
        else:
            en = _err_norm(_MILNE * (y_new - y_pred), y, y_new, config.atol, config.rtol)
            if en > 1.0:
                stats.n_steps_rejected += 1
                h = h_step * min(1.0, max(0.2, 0.9 * en ** -0.2))
                continue

        stats.n_steps_accepted += 1
        stats.corrector_iters_histogram[result.iterations] += 1
        stats.accepted_corrector_iters.append(result.iterations)
        t = t1 if final else t_new
        y, f = y_new, f_new
        state.push(t, y, f)
        ts.append(t)
        ys.append(y.copy())
        if not config.fixed_step:
            factor = 2.0 if en == 0 else min(2.0, max(0.2, 0.9 * en ** -0.2))
            if not final:
                h = min(h_step * factor, config.h_max, h_cap)
            h_cap *= _CAP_RELAX
    else:
        raise SolverError("max_steps exceeded", stats)
    return Trajectory(np.array(ts), np.array(ys), stats, f"abm-{config.corrector}")


# ---------------------------------------------------------------------------
# Problem library


def hollow_problem(net, t_span, y0, name="hollow"):
    """Autonomous dynamics ``y' = net(y)`` with one-sweep ``D_dim`` for the corrector."""

    def dynamics(t, y):
        return net.forward(y)

    def f_and_dim(t, y):
        f, (dv,) = net.dim_derivatives(y, 1, create_graph=False)
        return f, dv

    def jacobian(t, y):
        return net.jacobian(y)[0]

    return OdeProblem(dynamics, t_span, y0, jacobian=jacobian, f_and_dim_derivative=f_and_dim,
                      name=name)


def linear_problem(matrix, t_span, y0, name="linear"):
    a = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    diag = np.diag(a).copy()
    return OdeProblem(lambda t, y: a @ y, t_span, y0,
                      dim_derivative=lambda t, y: diag,
                      jacobian=lambda t, y: a, name=name)


# rows dominated by the diagonal; eigenvalues about -600.0 and -9.98
COUPLED_MATRIX = np.array([[-600.0, 5.0], [2.0, -10.0]])
PROBLEMS = ("decay", "stiff_decay", "linear_system", "hollow_random")


def make_problem(problem_id, d=10, seed=0):
    """Named test problems; ``d`` and ``seed`` only affect ``hollow_random``."""
    if problem_id == "decay":
        return linear_problem([[-1.0]], (0.0, 1.0), [1.0], name="decay")
    if problem_id == "stiff_decay":
        return linear_problem([[-1000.0]], (0.0, 0.1), [1.0], name="stiff_decay")
    if problem_id == "linear_system":
        return linear_problem(COUPLED_MATRIX, (0.0, 1.0), [1.0, 1.0], name="linear_system")
    if problem_id == "hollow_random":
        from .hollownet import HollowConfig, HollowNet

        net = HollowNet(HollowConfig(d=d, d_h=8, cond_hidden=(2 * d,), trans_hidden=(16,),
                                     zero_init_final=False, seed=seed))
        y0 = np.random.default_rng(seed).standard_normal(d)
        return hollow_problem(net, (0.0, 5.0), y0, name="hollow_random")
    raise ValueError(f"unknown problem '{problem_id}', expected one of {PROBLEMS}")


def analytic_solution(problem_id, t):
    """Closed-form solution where one exists (linear problems), else None."""
    from scipy.linalg import expm

    p = make_problem(problem_id) if problem_id != "hollow_random" else None
    if p is None:
        return None
    a = {"decay": [[-1.0]], "stiff_decay": [[-1000.0]], "linear_system": COUPLED_MATRIX}[problem_id]
    return np.array([expm(np.asarray(a) * (ti - p.t_span[0])) @ p.y0 for ti in np.atleast_1d(t)])
