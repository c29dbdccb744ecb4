import math

import numpy as np
import pytest

from flowlab import model as M
from flowlab.sim import (BINARY_MAGIC, ConfigurationError, FlowGrid, PathEnsemble, SimulationError,
                         brownian_increments, difference_quotient, drift_increment, drift_increment_jacobian,
                         propagate, simulate_flow, simulate_variational)
from flowlab.zoo import model_by_name

from conftest import linear_model, scalar_model

DT = 2.0 ** -8


def grid(anchors, n_paths=2000, dt=DT, record=(0.0, 0.5, 1.0), directions=(), **kw):
    return FlowGrid(anchors=[(s, np.atleast_1d(x)) for s, x in anchors], time_step=dt, n_paths=n_paths,
                    record_times=list(record), directions=directions, **kw)


def test_no_dynamics(zero_model):
    ens = simulate_flow(zero_model, grid([(0.0, 1.5), (0.5, -2.0)], n_paths=10, record=(0.5, 1.0)), seed=0)
    assert np.all(ens.states[0] == 1.5) and np.all(ens.states[1] == -2.0)


def test_ou_mean_three_se():
    nm = model_by_name("ou")
    ens = simulate_flow(nm.spec, grid([(0.0, 1.0)], n_paths=100_000, dt=2.0 ** -10, record=(1.0,)), seed=2024)
    x = ens.state(0, 1.0)[:, 0]
    se = x.std(ddof=1) / math.sqrt(x.size)
    assert abs(x.mean() - math.exp(-1)) < 3 * se


def test_gbm_martingale():
    m = scalar_model(lambda x: 0 * x, lambda x: 0 * x, lambda x: x, lambda x: np.ones_like(x))
    ens = simulate_flow(m, grid([(0.0, 1.0)], n_paths=100_000, record=(1.0,)), seed=7)
    x = ens.state(0)[:, 0]
    assert abs(x.mean() - 1.0) < 3 * x.std(ddof=1) / math.sqrt(x.size)


def test_ou_variational_closed_form():
    nm = model_by_name("ou")
    ens = simulate_flow(nm.spec, grid([(0.25, 1.0)], n_paths=50, record=(0.25, 0.5, 1.0)), seed=1)
    D = simulate_variational(nm.spec, ens, 0, np.array([2.0]))
    for k, t in enumerate(D.record_times):
        steps = round((t - 0.25) / DT)
        assert np.all(np.abs(D.values[:, k, 0] - 2.0 * (1 - DT) ** steps) <= 1e-12)


def test_gbm_variational_equals_flow_ratio():
    nm = model_by_name("gbm")
    x0 = np.array([1.7])
    ens = simulate_flow(nm.spec, grid([(0.0, x0)], n_paths=500), seed=3)
    D = simulate_variational(nm.spec, ens, 0, np.array([1.0]))
    assert np.allclose(D.values, ens.states[0] / x0, rtol=1e-12, atol=0)


def test_constant_coefficients_variational_is_v():
    m = linear_model(np.zeros((2, 2)), S=np.array([[1.0, 0.2], [0.0, 0.5]]))
    ens = simulate_flow(m, grid([(0.0, [0.1, 0.2])], n_paths=20), seed=0)
    v = np.array([0.6, -0.8])
    D = simulate_variational(m, ens, 0, v)
    assert np.all(D.values == v)


def test_quotient_linear_independent_of_y_and_zero_model(zero_model):
    nm = model_by_name("ou")
    g = grid([(0.0, 1.0)], n_paths=300, directions=[(np.array([1.0]), [1.0, 1e-3])])
    ens = simulate_flow(nm.spec, g, seed=4)
    a = difference_quotient(ens, 0, 0, 1.0).values
    b = difference_quotient(ens, 0, np.array([1.0]), 1e-3).values
    assert np.allclose(a, b, rtol=1e-9, atol=0)
    ez = simulate_flow(zero_model, g, seed=4)
    assert np.allclose(difference_quotient(ez, 0, 0, 1e-3).values, 1.0, rtol=1e-12)


def test_gl_quotient_converges_to_variational():
    nm = model_by_name("ginzburg_landau")
    ys = [1e-1, 1e-2, 1e-3]
    g = grid([(0.0, 0.5)], n_paths=2000, directions=[(np.array([1.0]), ys)], scheme="tamed_euler")
    ens = simulate_flow(nm.spec, g, seed=5)
    D = simulate_variational(nm.spec, ens, 0, np.array([1.0]))
    err = [np.sqrt(np.mean((difference_quotient(ens, 0, 0, y).values - D.values) ** 2)) for y in ys]
    order = np.polyfit(np.log(ys), np.log(err), 1)[0]
    assert np.all(np.diff(err) < 0)
    assert 0.9 <= order <= 1.1


def test_tamed_jacobian_matches_finite_differences():
    m = model_by_name("lorenz_stochastic").spec
    X = np.array([[1.0, 2.0, 20.0], [-5.0, 3.0, 10.0], [0.0, 0.0, 0.0]])
    dt = 0.01
    J = drift_increment_jacobian(m, X, dt, "tamed_euler")
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (drift_increment(m, X + e, dt, "tamed_euler") - drift_increment(m, X - e, dt, "tamed_euler")) / (2 * h)
        assert np.allclose(J[..., k], fd, rtol=1e-6, atol=1e-9)


def test_coupling_replays_identical_increments():
    a = brownian_increments(11, np.arange(50), 37, 2, DT)
    b = brownian_increments(11, np.arange(50), 37, 2, DT)
    assert np.array_equal(a, b)
    # anchors with equal start see the same noise: their difference is deterministic for OU
    nm = model_by_name("ou")
    ens = simulate_flow(nm.spec, grid([(0.0, 1.0), (0.0, 0.0)], n_paths=100), seed=11)
    diff = ens.states[0] - ens.states[1]
    assert np.ptp(diff[:, -1, 0]) < 1e-14


def test_difference_identity_em_exact():
    # Euler: one step of the quotient equals the averaged-Jacobian increment
    nm = model_by_name("ginzburg_landau")
    m = nm.spec
    P, dt, y = 200, 2.0 ** -6, 1e-2
    X = np.random.default_rng(0).uniform(-1, 1, (P, 1))
    Xt = X + y
    dW = brownian_increments(1, np.arange(P), 0, 1, dt)
    X1 = propagate(m, X, 0.0, dt, dt, seed=1)
    Xt1 = propagate(m, Xt, 0.0, dt, dt, seed=1)
    D0, D1 = (Xt - X) / y, (Xt1 - X1) / y
    Jbar = M.averaged_jacobian(m, Xt, X)
    Sbar = M.averaged_jacobian(m, Xt, X, "diffusion")
    pred = np.einsum("pij,pj->pi", Jbar, D0) * dt + np.einsum("pij,pj->pi", M.apply_direction(Sbar, D0), dW)
    assert np.max(np.abs((D1 - D0) - pred)) < 1e-12


def test_difference_identity_tamed_remainder_shrinks():
    m = model_by_name("ginzburg_landau").spec
    P = 500
    X = np.random.default_rng(1).uniform(-2, 2, (P, 1))

    def resid(dt, y):
        Xt = X + y
        X1 = propagate(m, X, 0.0, dt, dt, 1, "tamed_euler")
        Xt1 = propagate(m, Xt, 0.0, dt, dt, 1, "tamed_euler")
        D0, D1 = (Xt - X) / y, (Xt1 - X1) / y
        Jbar = M.averaged_jacobian(m, Xt, X)
        pred = np.einsum("pij,pj->pi", Jbar, D0) * dt  # additive noise: no sigma' term
        return np.max(np.abs((D1 - D0) - pred))

    r1, r2 = resid(2.0 ** -6, 1e-2), resid(2.0 ** -7, 5e-3)
    assert r2 < 0.6 * r1


def test_flow_property():
    nm = model_by_name("double_well")
    g = grid([(0.0, [0.3, -0.2])], n_paths=64, record=(0.5, 1.0), scheme="tamed_euler")
    ens = simulate_flow(nm.spec, g, seed=8)
    restart = propagate(nm.spec, ens.state(0, 0.5), 0.5, 1.0, DT, 8, "tamed_euler")
    assert np.array_equal(restart, ens.state(0, 1.0))


def test_later_anchor_shares_noise_on_overlap():
    nm = model_by_name("ou")
    g = grid([(0.0, 1.0), (0.5, 0.0)], n_paths=64, record=(0.5, 1.0))
    ens = simulate_flow(nm.spec, g, seed=9)
    restart = propagate(nm.spec, np.zeros((64, 1)), 0.5, 1.0, DT, 9)
    assert np.array_equal(restart, ens.state(1, 1.0))


@pytest.mark.parametrize("threads", [2, 4, 8])
def test_thread_count_independent(threads):
    nm = model_by_name("double_well")
    g = grid([(0.0, [0.5, 0.5])], n_paths=301, directions=[(np.array([1.0, 0.0]), [1e-2])],
             scheme="tamed_euler")
    a = simulate_flow(nm.spec, g, seed=1, n_threads=1)
    b = simulate_flow(nm.spec, g, seed=1, n_threads=threads)
    assert np.array_equal(a.states, b.states)
    da = simulate_variational(nm.spec, a, 0, np.array([0.0, 1.0]))
    db = simulate_variational(nm.spec, b, 0, np.array([0.0, 1.0]), n_threads=threads)
    assert np.array_equal(da.values, db.values)


def test_anchor_order_irrelevant():
    nm = model_by_name("ou")
    a = simulate_flow(nm.spec, grid([(0.0, 1.0), (0.0, -1.0)], n_paths=50), seed=3)
    b = simulate_flow(nm.spec, grid([(0.0, -1.0), (0.0, 1.0)], n_paths=50), seed=3)
    assert np.array_equal(a.states[0], b.states[1])


def test_exit_policies():
    nm = model_by_name("cir", xi=3.0)
    g = grid([(0.0, 0.2)], n_paths=2000, dt=2.0 ** -6)
    ens = simulate_flow(nm.spec, g, seed=0)
    assert 0 < ens.exit_fraction < 1
    assert np.all(ens.states[0] > 0)  # frozen inside the domain
    assert np.all(ens.valid(0))
    ex = ens.exited[0]
    assert np.all(np.isfinite(ens.exit_time[0][ex])) and np.all(np.isnan(ens.exit_time[0][~ex]))
    rej = simulate_flow(nm.spec, grid([(0.0, 0.2)], n_paths=2000, dt=2.0 ** -6, exit_policy="reject"), seed=0)
    assert np.array_equal(rej.valid(0), ~ens.exited[0])


def test_nan_state_raises_with_location():
    m = scalar_model(lambda x: np.where(np.abs(x) > 3, np.nan, x), lambda x: np.ones_like(x),
                     lambda x: np.ones_like(x), lambda x: np.zeros_like(x))
    with pytest.raises(SimulationError) as exc:
        simulate_flow(m, grid([(0.0, 2.9)], n_paths=100), seed=0)
    e = exc.value
    assert e.anchor == 0 and 0 <= e.path < 100 and e.step >= 0


def test_grid_validation():
    with pytest.raises(ConfigurationError):
        grid([(0.5, 1.0)], record=(0.25, 1.0))
    with pytest.raises(ConfigurationError):
        grid([(0.0, 1.0)], record=(0.3, 1.0))  # off the step grid
    with pytest.raises(ConfigurationError):
        grid([(0.0, 1.0)], directions=[(np.array([1.0]), [0.0])])
    with pytest.raises(ConfigurationError):
        grid([(0.0, 1.0)], record=(1.0, 0.5))
    cir = model_by_name("cir").spec
    with pytest.raises(ConfigurationError):
        simulate_flow(cir, grid([(0.0, 0.1)], directions=[(np.array([1.0]), [-0.5])]), seed=0)


def test_missing_perturbation():
    nm = model_by_name("ou")
    ens = simulate_flow(nm.spec, grid([(0.0, 1.0)], n_paths=5, directions=[(np.array([1.0]), [0.1])]), seed=0)
    with pytest.raises(ConfigurationError):
        difference_quotient(ens, 0, 0, 0.2)
    with pytest.raises(ConfigurationError):
        difference_quotient(ens, 0, np.array([-1.0]), 0.1)


def test_exports(tmp_path):
    nm = model_by_name("double_well")
    ens = simulate_flow(nm.spec, grid([(0.0, [0.5, 0.5]), (0.5, [0.0, 0.1])], n_paths=7, record=(0.5, 1.0)),
                        seed=0)
    ens.to_csv(tmp_path / "e.csv")
    raw = (tmp_path / "e.csv").read_bytes()
    lines = raw.decode("utf-8").split("\r\n")
    assert lines[0] == "path,anchor,anchor_s,anchor_x0,anchor_x1,t,state0,state1,exited"
    assert len([ln for ln in lines if ln]) == 1 + 2 * 7 * 2
    ens.to_binary(tmp_path / "e.bin")
    assert (tmp_path / "e.bin").read_bytes()[:8] == BINARY_MAGIC
    back = PathEnsemble.from_binary(tmp_path / "e.bin")
    assert np.array_equal(back.states, ens.states) and np.array_equal(back.anchor_x, ens.anchor_x)
    assert np.array_equal(back.record_times, ens.record_times) and back.seed == 0
    (tmp_path / "bad.bin").write_bytes(b"NOTMAGIC" + b"\0" * 40)
    with pytest.raises(ConfigurationError):
        PathEnsemble.from_binary(tmp_path / "bad.bin")
