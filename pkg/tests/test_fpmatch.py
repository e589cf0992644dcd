import math

import numpy as np
import pytest

from dimwise import adgraph as ag
from dimwise.adgraph import Tape
from dimwise.fpmatch import (
    AnnealSchedule,
    FpTrainConfig,
    FunctionSde,
    MixtureDensity,
    SdeModel,
    TrajectoryDataset,
    _brute_dim,
    evaluate_mae,
    fp_objective,
    fp_residual,
    fp_rhs,
    mixture_eval,
    ou_sde,
    pendulum_dataset,
    pendulum_sde,
    pseudo_ml_objective,
    sample_from_density,
    simulate_sde,
    train_fp_matching,
    train_pseudo_ml,
    write_results_csv,
)

from _util import rel_err


def random_density(d=2, m=3, seed=0, hidden=(8, 8, 8)):
    dens = MixtureDensity(d, m=m, hidden=hidden, seed=seed, t_scale=2.0)
    rng = np.random.default_rng(seed)
    for net in dens.nets:
        for v in net.params.values():
            v += 0.3 * rng.standard_normal(v.shape)
    return dens


def random_sde(d=2, seed=0, hidden=(8, 8, 8), kind="mlp"):
    return SdeModel(d, hidden=hidden, seed=seed, kind=kind, t_scale=2.0)


def standard_normal_density(d=1):
    return MixtureDensity(d, m=1).set_constant([1.0], np.zeros(d), np.ones(d))


# -- mixture -------------------------------------------------------------------


def test_standard_normal_at_mode():
    p, g, h, dt = mixture_eval(standard_normal_density(), 0.7, [[0.0]])
    c = 1 / math.sqrt(2 * math.pi)
    assert p[0] == pytest.approx(c, rel=1e-14)
    assert g[0, 0] == 0.0
    assert h[0, 0] == pytest.approx(-c, rel=1e-14)
    assert dt[0] == 0.0


def test_symmetric_mixture_gradient_vanishes_at_midpoint():
    dens = MixtureDensity(2, m=2).set_constant([0.5, 0.5], [[-1.0, 0.5], [1.0, 0.5]],
                                               [[0.7, 0.3], [0.7, 0.3]])
    _, g, _, _ = mixture_eval(dens, 0.0, [[0.0, 0.5]])
    np.testing.assert_allclose(g, 0.0, atol=1e-16)


def test_mixture_weights_and_scales_valid(rng):
    dens = random_density(seed=1)
    pi, _, s = dens.parameters_at(rng.uniform(-3, 3, 50))
    np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-14)
    assert np.all(pi > 0) and np.all(s > 0)


def test_mixture_outputs_match_finite_differences(rng):
    dens = random_density(seed=2)
    t = rng.uniform(0, 2, 6)
    x = rng.normal(size=(6, 2))
    p, g, h, dt = mixture_eval(dens, t, x)
    logp = dens.log_prob(t, x)
    np.testing.assert_allclose(np.log(p), logp, atol=1e-12)

    def p_at(tt, xx):
        return np.exp(dens.log_prob(tt, xx))

    fd_g, fd_h = np.empty_like(x), np.empty_like(x)
    for i in range(2):
        e = np.zeros_like(x)
        e[:, i] = 1e-5
        fd_g[:, i] = (p_at(t, x + e) - p_at(t, x - e)) / 2e-5
        e[:, i] = 1e-4
        fd_h[:, i] = (p_at(t, x + e) - 2 * p + p_at(t, x - e)) / 1e-8
    fd_dt = (p_at(t + 1e-5, x) - p_at(t - 1e-5, x)) / 2e-5
    assert np.max(rel_err(g, fd_g)) <= 1e-5
    assert np.max(rel_err(h, fd_h, floor=1e-3)) <= 1e-3
    assert np.max(rel_err(dt, fd_dt)) <= 1e-5


@pytest.mark.parametrize("t", [0.0, 1.3])
def test_mixture_normalization(t):
    dens = random_density(seed=3)
    axis = np.linspace(-10, 10, 401)
    gx, gy = np.meshgrid(axis, axis)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    p = np.exp(dens.log_prob(t, pts)).reshape(gx.shape)
    mass = np.trapezoid(np.trapezoid(p, axis, axis=1), axis)
    assert abs(mass - 1.0) <= 0.02
    d1 = random_density(d=1, seed=4)
    p1 = np.exp(d1.log_prob(t, axis[:, None]))
    assert abs(np.trapezoid(p1, axis) - 1.0) <= 0.02


def test_non_finite_density_parameters_rejected():
    dens = random_density()
    next(iter(dens.params.values()))[0] = np.nan
    with pytest.raises(ValueError):
        mixture_eval(dens, 0.0, [[0.0, 0.0]])


def test_sampling_single_component(rng):
    dens = MixtureDensity(2, m=1).set_constant([1.0], [[0.5, -1.0]], [[0.2, 2.0]])
    n = 20_000
    xs = sample_from_density(dens, 0.3, n, seed=5)
    se = np.array([0.2, 2.0]) / math.sqrt(n)
    assert np.all(np.abs(xs.mean(axis=0) - [0.5, -1.0]) <= 3 * se)


def test_sampling_component_frequencies():
    pi = np.array([0.3, 0.7])
    dens = MixtureDensity(1, m=2).set_constant(pi, [[-5.0], [5.0]], [[0.1], [0.1]])
    n = 10_000
    xs = sample_from_density(dens, 0.0, n, seed=6)
    freq = np.mean(xs[:, 0] > 0)
    assert abs(freq - 0.7) <= 3 * math.sqrt(0.21 / n)


# -- FP operator -------------------------------------------------------------


def test_ou_stationary_null():
    xs = np.linspace(-3, 3, 121)[:, None]
    r = fp_residual(ou_sde(), standard_normal_density(), 0.0, xs)
    assert np.mean(np.abs(r)) < 1e-3
    assert np.max(np.abs(r)) < 1e-12


def test_pure_advection():
    c = np.array([0.4, -1.3])
    sde = FunctionSde(lambda t, x: np.tile(c, (x.shape[0], 1)),
                      lambda t, x: np.zeros(x.shape), 2)
    dens = random_density(seed=7)
    x = np.random.default_rng(0).normal(size=(5, 2))
    _, g, _, _ = mixture_eval(dens, 0.5, x)
    np.testing.assert_allclose(fp_rhs(sde, dens, 0.5, x), -(g @ c), rtol=1e-12, atol=1e-15)


def _divergence_form_fd(sde, dens, t, x, h=1e-4):
    def p(xx):
        return np.exp(dens.log_prob(t, xx))

    def flux(xx):
        return sde.drift_values(t, xx) * p(xx)[:, None]

    def spread(xx):
        return sde.diffusion_values(t, xx) ** 2 * p(xx)[:, None]

    out = np.zeros(x.shape[0])
    for i in range(x.shape[1]):
        e = np.zeros_like(x)
        e[:, i] = h
        out -= (flux(x + e)[:, i] - flux(x - e)[:, i]) / (2 * h)
        out += 0.5 * (spread(x + e)[:, i] - 2 * spread(x)[:, i] + spread(x - e)[:, i]) / h**2
    return out


@pytest.mark.parametrize("kind", ["mlp", "hollow"])
def test_fp_rhs_matches_divergence_form(kind, rng):
    sde = random_sde(seed=8, kind=kind)
    dens = random_density(seed=9)
    t = rng.uniform(0, 2, 8)
    x = rng.normal(size=(8, 2))
    ours = fp_rhs(sde, dens, t, x)
    ref = np.array([_divergence_form_fd(sde, dens, t[k], x[k:k + 1])[0] for k in range(8)])
    assert np.max(rel_err(ours, ref, floor=1e-3)) <= 1e-3


def test_hollow_dim_derivatives_match_brute_force(rng):
    sde = random_sde(seed=10, kind="hollow")
    t = rng.uniform(0, 2, (4, 1))
    x0 = rng.normal(size=(4, 2))
    tape = Tape()
    tn, x = tape.constant(t), tape.leaf(x0)
    s = sde.terms(tn, x, create_graph=False)
    tape2 = Tape()
    tn2, x2 = tape2.constant(t), tape2.leaf(x0)
    f = sde.drift_node(tn2, x2)
    g = sde.diffusion_node(tn2, x2)
    dg = _brute_dim(g, x2, True)
    np.testing.assert_allclose(s.df.value, _brute_dim(f, x2).value, atol=1e-8)
    np.testing.assert_allclose(s.dg.value, dg.value, atol=1e-8)
    np.testing.assert_allclose(s.d2g.value, _brute_dim(dg, x2).value, atol=1e-8)
    np.testing.assert_array_equal(s.g.value, g.value)


def test_stationary_process_is_not_identifiable():
    xs = np.linspace(-3, 3, 31)[:, None]
    dens = standard_normal_density()
    for theta in (0.5, 1.0, 3.0):
        sde = ou_sde(theta=theta, sigma=math.sqrt(2 * theta))
        assert np.max(np.abs(fp_residual(sde, dens, 0.0, xs))) < 1e-12


# -- objectives ----------------------------------------------------------------


def _tiny_problem(seed=0):
    sde = random_sde(seed=seed, hidden=(4, 4, 4))
    dens = random_density(m=2, seed=seed + 1, hidden=(4, 4, 4))
    rng = np.random.default_rng(seed)
    return sde, dens, rng.uniform(0, 2, 6), rng.normal(size=(6, 2))


def _objective_grads(sde, dens, t, x, lam):
    tape, loss, _ = fp_objective(sde, dens, t, x, lam)
    nodes = {**sde._grad_names(tape)}
    for net in dens.nets:
        nodes.update(net.bind(tape))
    names = list(nodes)
    return float(loss.value), dict(zip(names, tape.grad(loss, [nodes[k] for k in names])))


def _fd(params, name, fn, eps=1e-6):
    arr = params[name]
    out = np.empty_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + eps
        up = fn()
        arr[idx] = old - eps
        dn = fn()
        arr[idx] = old
        out[idx] = (up - dn) / (2 * eps)
    return out


def test_objective_gradient_matches_finite_differences():
    lam = 0.6
    sde, dens, t, x = _tiny_problem()
    _, grads = _objective_grads(sde, dens, t, x, lam)

    def residual():
        return float(np.mean(np.abs(fp_residual(sde, dens, t, x))))

    def density_side():
        return -float(np.mean(dens.log_prob(t, x))) + lam * residual()

    worst = 0.0
    for name in sde.params:
        worst = max(worst, float(np.max(rel_err(grads[name], _fd(sde.params, name, residual),
                                                floor=1e-4))))
    for name in dens.params:
        worst = max(worst, float(np.max(rel_err(grads[name],
                                                _fd(dens.params, name, density_side),
                                                floor=1e-4))))
    assert worst <= 1e-4


def test_lambda_zero_decouples_density():
    sde, dens, t, x = _tiny_problem(seed=3)
    _, grads = _objective_grads(sde, dens, t, x, 0.0)
    tape = Tape()
    nodes = {}
    for net in dens.nets:
        nodes.update(net.bind(tape))
    nll = ag.neg(ag.mean(dens.terms(tape.constant(t.reshape(-1, 1)), tape.constant(x))["logp"]))
    ref = dict(zip(nodes, tape.grad(nll, list(nodes.values()))))
    for k in nodes:
        np.testing.assert_allclose(grads[k], ref[k], rtol=0, atol=1e-13)


def test_objective_is_order_invariant():
    sde, dens, t, x = _tiny_problem(seed=4)
    perm = np.random.default_rng(1).permutation(t.size)
    a, ga = _objective_grads(sde, dens, t, x, 0.5)
    b, gb = _objective_grads(sde, dens, t[perm], x[perm], 0.5)
    assert a == b
    for k in ga:
        assert ga[k].tobytes() == gb[k].tobytes()


def test_pseudo_ml_closed_form():
    sigma, dt = 0.7, 0.25
    sde = FunctionSde(lambda t, x: np.zeros(x.shape), lambda t, x: np.full(x.shape, sigma), 1)
    ds = TrajectoryDataset([[0.0, dt]], [[[0.3], [1.1]]])
    var = sigma**2 * dt
    expect = 0.5 * ((1.1 - 0.3) ** 2 / var + math.log(2 * math.pi * var))
    assert pseudo_ml_objective(sde, ds) == pytest.approx(expect, rel=1e-14)


def test_pseudo_ml_prefers_truth_on_dense_ou():
    truth = ou_sde()
    ds = simulate_sde(truth, np.random.default_rng(0).normal(size=(200, 1)), n_obs=40,
                      obs_dt=0.05, dt=0.005, seed=1)
    null = FunctionSde(lambda t, x: np.zeros(x.shape), lambda t, x: np.full(x.shape, 2.0**0.5), 1)
    assert pseudo_ml_objective(truth, ds) < pseudo_ml_objective(null, ds)


def test_non_increasing_times_rejected():
    with pytest.raises(ValueError):
        TrajectoryDataset([[0.0, 0.0]], [[[0.0], [1.0]]])


# -- data ----------------------------------------------------------------------


def test_deterministic_pendulum_matches_fine_reference():
    drift_only = FunctionSde(pendulum_sde().drift_fn, lambda t, x: np.zeros(x.shape), 2)
    x0 = np.array([[1.0, 0.0], [-1.4, 0.2]])
    errs = []
    for dt in (0.01, 0.005):
        ds = simulate_sde(drift_only, x0, n_obs=6, obs_dt=0.1, dt=dt, seed=0)
        ref = simulate_sde(drift_only, x0, n_obs=6, obs_dt=0.1, dt=2e-5, seed=0)
        errs.append(np.max(np.abs(ds.x[:, -1] - ref.x[:, -1])))
    assert errs[0] < 0.05
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.15)


def test_wiener_increments():
    sigma, dt = 0.5, 0.01
    sde = FunctionSde(lambda t, x: np.zeros(x.shape), lambda t, x: np.full(x.shape, sigma), 1)
    ds = simulate_sde(sde, np.zeros((2000, 1)), n_obs=51, obs_dt=dt, dt=dt, seed=3)
    inc = np.diff(ds.x[:, :, 0], axis=1).ravel()
    assert inc.size == 100_000
    var = sigma**2 * dt
    se = var * math.sqrt(2 / (inc.size - 1))
    assert abs(inc.var(ddof=1) - var) <= 3 * se


def test_simulation_deterministic_and_validated():
    a = pendulum_dataset(20, seed=4)
    b = pendulum_dataset(20, seed=4)
    assert a.x.tobytes() == b.x.tobytes()
    assert a.x.shape == (20, 50, 2)
    np.testing.assert_allclose(np.diff(a.t[0]), 0.1)
    with pytest.raises(ValueError):
        simulate_sde(pendulum_sde(), np.zeros((1, 2)), dt=0.0)


def test_subsample_and_csv(tmp_path):
    ds = pendulum_dataset(30, seed=1)
    for r, keep in ((1.0, 50), (0.2, 10), (0.04, 2), (0.001, 2)):
        assert np.all(ds.subsample(r, seed=0).mask.sum(axis=1) == keep)
    sub = ds.subsample(0.2, seed=0)
    t0, _, t1, _ = sub.pairs()
    assert t0.size == 30 * 9 and np.all(t1 > t0)
    with pytest.raises(ValueError):
        ds.subsample(0.0)
    path = tmp_path / "data.csv"
    sub.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "traj_id,t,x_0,x_1" and len(lines) == 301


def test_mae_examples(rng):
    truth = pendulum_sde()
    t, x = rng.uniform(0, 5, 100), rng.normal(size=(100, 2))
    assert evaluate_mae(truth, truth, t, x) == (0.0, 0.0)
    shifted = FunctionSde(lambda t_, x_: ag.add(truth.drift_fn(t_, x_), 0.1),
                          truth.diffusion_fn, 2)
    drift, diff = evaluate_mae(shifted, truth, t, x)
    assert drift == pytest.approx(0.1, abs=1e-12) and diff == 0.0


def test_anneal_schedule():
    s = AnnealSchedule(1.0, 100)
    vals = [s(i) for i in range(0, 121, 10)]
    assert vals[0] == 1.0 and s(100) == 0.0
    assert all(a >= b for a, b in zip(vals, vals[1:]))


# -- training smoke --------------------------------------------------------------


def test_short_trainings_keep_diffusion_positive(tmp_path):
    ds = pendulum_dataset(50, seed=2).subsample(0.2, seed=0)
    sde = SdeModel(2, hidden=(8, 8, 8), t_scale=4.9)
    dens = MixtureDensity(2, hidden=(8, 8, 8), t_scale=4.9).init_from_data(ds.points()[1])
    cfg = FpTrainConfig(iters=30, batch_size=32, log_every=10)
    res = train_fp_matching(sde, dens, ds, cfg)
    assert res.curve[-1][2] < res.curve[0][2]
    assert np.all(sde.diffusion_values(*ds.points()) > 0)
    pml = SdeModel(2, hidden=(8, 8, 8), t_scale=4.9)
    res = train_pseudo_ml(pml, ds, cfg)
    assert res.curve[-1][1] < res.curve[0][1]
    write_results_csv(tmp_path / "r.csv", [{"method": "pseudo_ml", "retention": 0.2,
                                             "drift_mae": 0.5, "diffusion_mae": 0.1,
                                             "seed": 0}])
    assert (tmp_path / "r.csv").read_text().splitlines() == [
        "method,retention,drift_mae,diffusion_mae,seed", "pseudo_ml,0.2,0.5,0.1,0"]
