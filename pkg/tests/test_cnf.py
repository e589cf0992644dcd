import math

import numpy as np
import pytest

from dimwise.cnf import (
    LOG_2PI,
    AugmentedState,
    CnfModel,
    TraceEstimator,
    TrainConfig,
    TrainingDivergence,
    augmented_dynamics,
    base_log_prob,
    density_grid,
    gaussian_fit_nll,
    grid_mass,
    log_density,
    make_dataset,
    sample,
    train_mle,
    write_curve,
    write_density_grid,
)
from dimwise.hollownet import HollowConfig, HollowNet
from dimwise.odesolve import SolverConfig


def linear_model(d, slope=0.0, offset=0.0):
    """Dynamics ``f(t, x) = slope * x + offset`` with the conditioner cut off."""
    net = HollowNet(HollowConfig(d=d, activation="linear", trans_hidden=(4,), n_cond=1))
    for k, v in net.params.items():
        if k.startswith("trans"):
            v[...] = 0.0
    net.params["trans.0.W"][0, 0] = 1.0
    net.params["trans.1.W"][0, 0] = slope
    net.params["trans.1.b"][...] = offset
    return CnfModel(net)


def random_model(d, seed=0):
    net = HollowNet(HollowConfig(d=d, cond_hidden=(16,), trans_hidden=(16, 16), n_cond=1,
                                 zero_init_final=False, seed=seed))
    return CnfModel(net)


# -- augmented dynamics ------------------------------------------------------


def test_zero_dynamics_leave_density_unchanged(rng):
    m = linear_model(3)
    x = rng.normal(size=(4, 3))
    s = augmented_dynamics(m, TraceEstimator("exact"), 0.5, AugmentedState(x, np.zeros(4)))
    assert np.all(s.x == 0.0) and np.all(s.logp_delta == 0.0)
    np.testing.assert_allclose(log_density(m, x), base_log_prob(x), atol=1e-14)


def test_linear_dynamics_trace_rate(rng):
    m = linear_model(3, slope=0.7)
    x = rng.normal(size=(2, 3))
    for mode in ("exact", "brute_force"):
        s = augmented_dynamics(m, TraceEstimator(mode), 0.1, AugmentedState(x, np.zeros(2)))
        np.testing.assert_allclose(s.logp_delta, -3 * 0.7, atol=1e-14)
        np.testing.assert_allclose(s.x, 0.7 * x, atol=1e-14)


@pytest.mark.parametrize("d", [2, 5, 10])
def test_exact_trace_equals_brute_force(d, rng):
    m = random_model(d, seed=d)
    x = rng.normal(size=(3, d))
    st = AugmentedState(x, np.zeros(3))
    ex = augmented_dynamics(m, TraceEstimator("exact"), 0.3, st)
    bf = augmented_dynamics(m, TraceEstimator("brute_force"), 0.3, st)
    np.testing.assert_allclose(ex.logp_delta, bf.logp_delta, rtol=0, atol=1e-10)
    jac = m.dynamics.jacobian(x, cond=0.3)
    np.testing.assert_allclose(-ex.logp_delta, np.trace(jac, axis1=1, axis2=2), atol=1e-10)


def _probe_samples(m, x, n, mode_seed):
    """``n`` single-probe Hutchinson estimates at the point ``x`` (one per row)."""
    rows = np.repeat(x[None], n, axis=0)
    est = TraceEstimator("hutchinson", n_probes=1, seed=mode_seed)
    return -augmented_dynamics(m, est, 0.2, AugmentedState(rows, np.zeros(n))).logp_delta


def test_hutchinson_within_three_standard_errors(rng):
    m = random_model(5, seed=3)
    x = rng.normal(size=5)
    exact = -augmented_dynamics(m, TraceEstimator("exact"), 0.2,
                                AugmentedState(x[None], np.zeros(1))).logp_delta[0]
    samples = _probe_samples(m, x, 10_000, mode_seed=1)
    se = samples.std(ddof=1) / math.sqrt(samples.size)
    assert se > 0
    assert abs(samples.mean() - exact) <= 3 * se


def test_hutchinson_standard_error_slope(rng):
    m = random_model(3, seed=4)
    x = rng.normal(size=3)
    reps = 200
    ns = np.array([8, 32, 128, 512])
    ses = []
    for n in ns:
        s = _probe_samples(m, x, reps * n, mode_seed=int(n)).reshape(reps, n)
        ses.append(s.mean(axis=1).std(ddof=1))
    slope = np.polyfit(np.log(ns), np.log(ses), 1)[0]
    assert abs(slope + 0.5) <= 0.1, slope


def test_gaussian_probes_supported(rng):
    m = random_model(2, seed=5)
    est = TraceEstimator("hutchinson", n_probes=4, probe_dist="gaussian", seed=0)
    s = augmented_dynamics(m, est, 0.0, AugmentedState(rng.normal(size=(3, 2)), np.zeros(3)))
    assert np.all(np.isfinite(s.logp_delta))


@pytest.mark.parametrize("kw", [dict(mode="svd"), dict(mode="hutchinson", n_probes=0),
                                dict(probe_dist="uniform")])
def test_invalid_estimator(kw):
    with pytest.raises(ValueError):
        TraceEstimator(**kw)


# -- log density and sampling ------------------------------------------------


@pytest.mark.parametrize("d", [1, 2])
def test_linear_flow_closed_form(d, rng):
    a, t_span = 0.8, (0.0, 1.5)
    m = linear_model(d, slope=a)
    m.t_span = t_span
    big_t = t_span[1] - t_span[0]
    x = rng.normal(size=(5, d))
    x0 = x * math.exp(-a * big_t)
    expect = base_log_prob(x0) - d * a * big_t
    cfg = SolverConfig(rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(log_density(m, x, solver_config=cfg), expect, atol=1e-8)


def test_log_density_exact_matches_brute_force(rng):
    m = random_model(3, seed=6)
    x = rng.normal(size=(4, 3))
    cfg = SolverConfig(rtol=1e-6, atol=1e-6)
    a = log_density(m, x, TraceEstimator("exact"), cfg)
    b = log_density(m, x, TraceEstimator("brute_force"), cfg)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-6)


def test_exact_mode_is_seed_independent(rng):
    m = random_model(2, seed=7)
    x = rng.normal(size=(3, 2))
    a = log_density(m, x, TraceEstimator("exact", seed=1), n_steps=10)
    b = log_density(m, x, TraceEstimator("exact", seed=99), n_steps=10)
    assert a.tobytes() == b.tobytes()
    h1 = log_density(m, x, TraceEstimator("hutchinson", seed=1), n_steps=10)
    h1b = log_density(m, x, TraceEstimator("hutchinson", seed=1), n_steps=10)
    h2 = log_density(m, x, TraceEstimator("hutchinson", seed=2), n_steps=10)
    assert h1.tobytes() == h1b.tobytes()
    assert not np.array_equal(h1, h2)


def test_sample_identity_and_shift():
    draws = np.random.default_rng(3).standard_normal((50, 2))
    np.testing.assert_array_equal(sample(linear_model(2), 50, seed=3), draws)
    m = linear_model(2, offset=0.4)
    m.t_span = (0.0, 2.0)
    np.testing.assert_allclose(sample(m, 50, seed=3), draws + 0.8, atol=1e-12)
    np.testing.assert_allclose(sample(m, 50, seed=3, n_steps=5), draws + 0.8, atol=1e-12)


def test_sample_round_trip_finite():
    m = random_model(2, seed=8)
    pts = sample(m, 1000, seed=0, n_steps=10)
    assert np.all(np.isfinite(log_density(m, pts, n_steps=10)))


# -- datasets and training -----------------------------------------------------


def test_datasets_seeded_and_shaped():
    for name in ("ring8", "moons", "gauss"):
        a = make_dataset(name, 100, seed=1)
        assert a.shape == (100, 2)
        assert a.tobytes() == make_dataset(name, 100, seed=1).tobytes()
    with pytest.raises(ValueError):
        make_dataset("spiral", 10)
    ring = make_dataset("ring8", 5000, seed=0)
    assert np.median(np.linalg.norm(ring, axis=1)) == pytest.approx(2.0, abs=0.05)


def test_gaussian_fit_nll_closed_form():
    data = make_dataset("gauss", 200_000, seed=2)
    assert gaussian_fit_nll(data) == pytest.approx(1.0 + LOG_2PI, abs=0.01)


def test_base_distributed_data_stays_near_base_entropy():
    data = make_dataset("gauss", 4000, seed=3)
    m = CnfModel.create(2, cond_hidden=(8,), trans_hidden=(16,), seed=0)
    train_mle(m, data, TraceEstimator("exact"),
              TrainConfig(iters=40, batch_size=64, n_steps=10, eval_every=40, eval_size=64))
    nll = -float(np.mean(log_density(m, data, n_steps=10)))
    assert abs(nll - (1.0 + LOG_2PI)) <= 0.05 + 3 * math.sqrt(1.0 / data.shape[0])


def test_short_training_reduces_nll(tmp_path):
    data = make_dataset("ring8", 2000, seed=0)
    m = CnfModel.create(2, cond_hidden=(16,), trans_hidden=(16, 16), seed=0)
    res = train_mle(m, data, TraceEstimator("hutchinson", seed=1),
                    TrainConfig(iters=60, batch_size=32, n_steps=8, eval_every=30,
                                eval_size=256))
    assert [it for it, _ in res.eval_curve] == [0, 30, 60]
    assert res.eval_curve[-1][1] < res.eval_curve[0][1]
    assert all(nfe == 32 for _, _, nfe in res.curve)
    write_curve(tmp_path / "curve.csv", res)
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "iter,nll,nfe" and len(lines) == 61


def test_training_stops_below_threshold():
    data = make_dataset("ring8", 500, seed=0)
    m = CnfModel.create(2, cond_hidden=(8,), trans_hidden=(8,), seed=0)
    res = train_mle(m, data, TraceEstimator("exact"),
                    TrainConfig(iters=50, batch_size=16, n_steps=4, eval_every=5,
                                eval_size=64, stop_below=1e9))
    assert res.stopped_at == 5
    assert res.first_reaching(1e9) == 0


def test_nan_loss_aborts():
    data = make_dataset("gauss", 100, seed=0)
    data[:] = np.nan
    m = CnfModel.create(2, cond_hidden=(8,), trans_hidden=(8,), seed=0)
    with pytest.raises(TrainingDivergence):
        train_mle(m, data, TraceEstimator("exact"),
                  TrainConfig(iters=3, batch_size=8, n_steps=2, eval_every=10, eval_size=8),
                  eval_data=np.zeros((4, 2)))


def test_one_dimensional_model_normalizes(tmp_path):
    rng = np.random.default_rng(0)
    data = np.concatenate([rng.normal(-1.5, 0.4, 1000), rng.normal(1.0, 0.5, 1000)])[:, None]
    m = CnfModel.create(1, cond_hidden=(8,), trans_hidden=(16, 16), seed=1)
    train_mle(m, data, TraceEstimator("exact"),
              TrainConfig(iters=150, batch_size=64, lr=1e-2, n_steps=10, eval_every=150,
                          eval_size=128))
    lo, hi, n = -8.0, 8.0, 401
    pts, logp, _ = density_grid(m, lo, hi, n)
    assert abs(grid_mass(pts, logp, lo, hi, n) - 1.0) <= 0.01
    write_density_grid(tmp_path / "g.csv", pts, logp)
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "x,logp"
