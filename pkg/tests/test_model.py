import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.stats import qmc

from flowlab import model as M
from flowlab.model import DegeneratePairError, DomainError, EvaluationError, Lyapunov, quadratic_lyapunov
from flowlab.zoo import NAMES, model_by_name

from conftest import linear_model, scalar_model

CERTIFIED = [n for n in NAMES if model_by_name(n).certified]


def gl_1d(**kw):
    return scalar_model(lambda x: x - x ** 3, lambda x: 1 - 3 * x ** 2, lambda x: np.ones_like(x),
                        lambda x: np.zeros_like(x), lyapunov_V0=quadratic_lyapunov(1), **kw)


# ---------------------------------------------------------------- ModelSpec


def test_validation_rejects_bad_exponents():
    m = model_by_name("ginzburg_landau").spec
    with pytest.raises(ValueError):
        m.replace(p_exp=1.5)
    with pytest.raises(ValueError):
        m.replace(q_exp=6.0, q0=6.0)  # q must exceed 2p
    with pytest.raises(ValueError):
        m.replace(q0=10.0)  # 1/q0 + 1/q1 != 1/q
    with pytest.raises(ValueError):
        m.replace(gamma=0.1)  # pq/(p+q) = 2.4 < 1/gamma
    with pytest.raises(ValueError):
        m.replace(delta=0.0)
    with pytest.raises(ValueError):
        m.replace(horizon_weighting="bogus")


def test_split_exponents_accepted():
    m = model_by_name("ginzburg_landau").spec.replace(q0=24.0, q1=24.0)
    assert m.q0 == 24.0


def test_flag_when_exponent_small():
    m = model_by_name("ginzburg_landau").spec
    assert m.moment_exponent == pytest.approx(2.4)
    assert any("2d+6" in f for f in m.flags)
    big = m.replace(p_exp=20.0, q_exp=200.0, q0=200.0)
    assert big.flags == []


def test_inverse_extended():
    assert M.inverse(math.inf) == 0.0
    assert M.inverse(4.0) == 0.25


# ---------------------------------------------------------------- generator


def test_generator_ou_examples():
    ou = model_by_name("ou").spec
    assert M.generator_apply(ou, 0, np.array([0.0])) == 1.0
    assert M.generator_apply(ou, 0, np.array([2.0])) == -7.0
    # symbolic oracle -2x^2 + 1 on a vector of points
    x = np.linspace(-3, 3, 13)[:, None]
    assert np.allclose(M.generator_apply(ou, 0, x), -2 * x[:, 0] ** 2 + 1, rtol=0, atol=1e-12)


def test_generator_gl_with_fd_hessian_oracle():
    m = gl_1d()
    assert M.generator_apply(m, 0, np.array([1.0])) == pytest.approx(1.0, abs=1e-14)
    # oracle with finite-difference derivatives of V
    V = lambda z: z * z
    for x in (-1.3, 0.2, 2.1):
        h = 1e-4
        g = (V(x + h) - V(x - h)) / (2 * h)
        H = (V(x + h) - 2 * V(x) + V(x - h)) / h ** 2
        ref = g * (x - x ** 3) + 0.5 * H
        assert M.generator_apply(m, 0, np.array([x])) == pytest.approx(ref, rel=1e-6)


@pytest.mark.parametrize("name", NAMES)
def test_generator_constant_lyapunov_is_zero(name):
    nm = model_by_name(name)
    d = nm.spec.dim_state
    const = Lyapunov(lambda x: np.full(np.shape(x)[:-1], 3.0), lambda x: np.zeros(np.shape(x)),
                     lambda x: np.zeros(np.shape(x) + (d,)))
    m = nm.spec.replace(lyapunov_V0=const)
    x = nm.box_lo + (nm.box_hi - nm.box_lo) * np.random.default_rng(0).random((50, d))
    assert np.all(M.generator_apply(m, 0, x) == 0.0)


def test_generator_errors():
    cir = model_by_name("cir").spec
    with pytest.raises(DomainError):
        M.generator_apply(cir, 0, np.array([-1.0]))
    bad = gl_1d().replace(drift=lambda x: np.full(np.shape(x), np.nan))
    with pytest.raises(EvaluationError) as exc:
        M.generator_apply(bad, 0, np.array([0.5]))
    assert np.array_equal(exc.value.x, [0.5])


# ---------------------------------------------------------------- averaged Jacobian


def test_averaged_jacobian_linear_is_constant():
    A = np.array([[1.0, 2.0], [-3.0, 0.5]])
    m = linear_model(A)
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(2, 20, 2))
    assert np.allclose(M.averaged_jacobian(m, x, y), A, rtol=0, atol=1e-14)


def test_averaged_jacobian_gl_zero_one():
    m = gl_1d()
    for nodes in (2, 3, 8):
        J = M.averaged_jacobian(m, np.array([0.0]), np.array([1.0]), nodes=nodes)
        assert J[0, 0] == pytest.approx(0.0, abs=1e-14)


def test_averaged_jacobian_matches_quadrature_oracle():
    dw = model_by_name("double_well").spec
    rng = np.random.default_rng(2)
    for _ in range(5):
        x, y = rng.uniform(-2, 2, size=(2, 2))
        ref = np.empty((2, 2))
        for i in range(2):
            for j in range(2):
                ref[i, j] = integrate.quad(lambda l: dw.drift_jacobian(l * x + (1 - l) * y)[i, j], 0, 1)[0]
        assert np.allclose(M.averaged_jacobian(dw, x, y), ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("name", NAMES)
def test_averaged_jacobian_diagonal_bitwise(name):
    nm = model_by_name(name)
    x = 0.5 * (nm.box_lo + nm.box_hi) + 0.1
    assert np.array_equal(M.averaged_jacobian(nm.spec, x, x), nm.spec.drift_jacobian(x))
    assert np.array_equal(M.averaged_jacobian(nm.spec, x, x, "diffusion"), nm.spec.diffusion_jacobian(x))


def test_gauss_legendre_exactness():
    nodes, w = M.gauss_legendre(4)
    assert np.sum(w * nodes ** 7) == pytest.approx(1 / 8, abs=1e-15)
    with pytest.raises(ValueError):
        M.gauss_legendre(0)


# ---------------------------------------------------------------- monotonicity


def test_c1_linear_additive_example():
    m = linear_model(-np.eye(1), S=[[0.7]], delta=0.5)
    marg = M.monotonicity_margin_C1(m, 0.0, np.array([0.3]), np.array([-1.0]), np.array([1.0]))
    assert marg == pytest.approx(0.5, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=6, max_size=6), st.floats(0.0, 0.99))
def test_c1_two_homogeneous(vals, t):
    m = model_by_name("double_well").spec
    x, y, h = np.array(vals[:2]), np.array(vals[2:4]), np.array(vals[4:]) + np.array([1e-3, 0])
    base = M.monotonicity_margin_C1(m, t, x, y, h)
    for s in (0.5, 2.0, 10.0):
        val = M.monotonicity_margin_C1(m, t, x, y, s * h)
        assert val == pytest.approx(s * s * base, rel=1e-10, abs=1e-12 * s * s)


def test_c1_time_domain_and_weighting():
    m = model_by_name("ginzburg_landau").spec
    x, y, h = np.array([0.1]), np.array([0.2]), np.array([1.0])
    with pytest.raises(DomainError):
        M.monotonicity_margin_C1(m, 1.0, x, y, h)
    mt = m.replace(horizon_weighting="T-t")
    # with t = 0 the two weightings agree
    assert M.monotonicity_margin_C1(mt, 0.0, x, y, h) == pytest.approx(M.monotonicity_margin_C1(m, 0.0, x, y, h))
    # later times give (T-t) < T, larger weights, larger margin
    assert M.monotonicity_margin_C1(mt, 0.5, x, y, h) > M.monotonicity_margin_C1(m, 0.5, x, y, h)


def test_c0_linear_example_and_symmetry():
    m = linear_model(-np.eye(2), phi=0.3)
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(2, 10, 2))
    nn = np.sum((x - y) ** 2, axis=-1)
    assert np.allclose(M.monotonicity_margin_C0(m, 0.2, x, y), nn * 1.3, rtol=1e-13)
    dw = model_by_name("double_well").spec
    a = M.monotonicity_margin_C0(dw, 0.2, x, y)
    b = M.monotonicity_margin_C0(dw, 0.2, y, x)
    assert np.allclose(a, b, rtol=1e-13, atol=1e-13)
    with pytest.raises(DegeneratePairError):
        M.monotonicity_margin_C0(dw, 0.2, x[0], x[0])


@pytest.mark.parametrize("name", ["ginzburg_landau", "double_well", "gbm", "lorenz_stochastic"])
def test_c0_over_eps2_tends_to_c1_plus_delta_terms(name):
    nm = model_by_name(name)
    m = nm.spec
    d = m.dim_state
    rng = np.random.default_rng(5)
    x = nm.default_anchor + 0.1 * rng.normal(size=d)
    h = rng.normal(size=d)
    t = 0.25
    sh = M.apply_direction(m.diffusion_jacobian(x), h)
    limit = (M.monotonicity_margin_C1(m, t, x, x, h) + m.delta * h @ h + 0.5 * m.delta * np.sum(sh * sh))
    eps = np.array([1e-1, 1e-2, 1e-3])
    err = np.array([abs(M.monotonicity_margin_C0(m, t, x + e * h, x) / e ** 2 - limit) for e in eps])
    if np.all(err < 1e-9 * max(1.0, abs(limit))):
        return  # linear in the relevant part: exact
    order = np.polyfit(np.log(eps), np.log(err), 1)[0]
    assert order >= 1.0 - 0.05


# ---------------------------------------------------------------- exponential moment margins


def test_exp_margin_ou_identically_zero():
    # sigma = 1: G V + |sigma grad V|^2/2 = -2x^2 + 1 + 2x^2 = 1 = beta
    m = linear_model(-np.eye(1), lyapunov_V0=quadratic_lyapunov(1), alpha0=0.0, beta0=1.0)
    x = np.linspace(-4, 4, 41)[:, None]
    assert np.allclose(M.exp_moment_margin(m, 0, 0.0, x), 0.0, atol=1e-12)


def test_exp_margin_all_zero(zero_model):
    x = np.linspace(-4, 4, 9)[:, None]
    assert np.all(M.exp_moment_margin(zero_model, 0, 0.3, x) == 0.0)
    assert np.all(M.exp_moment_margin(zero_model, 1, 0.3, x) == 0.0)


def test_exp_margin_gl_grid_oracle():
    m = model_by_name("ginzburg_landau").spec
    x = np.linspace(-3, 3, 6001)[:, None]
    for t in (0.0, 0.5, 1.0):
        # closed form: 3x^2 + 1 - [2x(x - x^3) + 0.25 + x^2/(2 e^{3t}) * ... ]
        ref = 3 * x[:, 0] ** 2 + 1 - (2 * x[:, 0] * (x[:, 0] - x[:, 0] ** 3) + 0.25
                                      + (0.5 * 2 * x[:, 0]) ** 2 / (2 * math.exp(3 * t)))
        got = M.exp_moment_margin(m, 0, t, x)
        assert np.allclose(got, ref, atol=1e-12)
        assert got.min() >= 0


def test_exp_margin_vbar_only_for_v1():
    vb = lambda t, x: np.ones(np.broadcast_shapes(np.shape(t), np.shape(x)[:-1]))
    m = linear_model(-np.eye(1), vbar=vb, beta0=0.0, beta1=0.0)
    x = np.array([[0.5]])
    assert M.exp_moment_margin(m, 0, 0.0, x)[0] == 0.0
    assert M.exp_moment_margin(m, 1, 0.0, x)[0] == -1.0


# ---------------------------------------------------------------- growth margins


def test_growth_zero_coefficients(zero_model):
    m = zero_model.replace(lyapunov_V0=quadratic_lyapunov(1), gamma=1.5)
    x = np.array([2.0])
    assert M.coeff_growth_margin(m, x) == pytest.approx(2.0 * 5.0 ** 1.5)


def test_growth_gl_ratio_oracle():
    m = gl_1d(gamma=1.5, c1=2.0)
    x = np.linspace(-10, 10, 20001)
    ratio = np.maximum(np.abs(x - x ** 3), 1.0) / (1 + x * x) ** 1.5
    assert ratio.max() <= 1.0  # well inside c1 = 2
    assert M.coeff_growth_margin(m, x[:, None]).min() >= 0


def test_growth_lipschitz_example():
    m = gl_1d(gamma=0.5, c3=3.0)
    g = np.linspace(-4, 4, 161)
    X, Y = np.meshgrid(g, g)
    x, y = X.ravel()[:, None], Y.ravel()[:, None]
    gm = M.growth_margins(m, x, y)
    ref = 3 * np.abs(x - y)[:, 0] * (4 + 2 * x[:, 0] ** 2 + 2 * y[:, 0] ** 2) ** 0.5 \
        - np.abs(3 * (x[:, 0] ** 2 - y[:, 0] ** 2))
    assert np.allclose(gm.jacobian_lipschitz, ref, atol=1e-10)
    assert gm.jacobian_lipschitz.min() >= -1e-12


def test_jacobian_lipschitz_vanishes_on_identical_pairs():
    m = model_by_name("double_well").spec
    x = np.array([0.3, -0.4])
    y = np.array([1.0, 0.2])
    for lam in (0.0, 0.25, 1.0):
        assert M.jacobian_lipschitz_margin(m, lam, x, y, x, y) == 0.0


# ---------------------------------------------------------------- self-consistency


@pytest.mark.parametrize("name", NAMES)
def test_builtin_derivatives_match_finite_differences(name):
    nm = model_by_name(name)
    d = nm.spec.dim_state
    u = qmc.Sobol(d, scramble=True, seed=0).random(2 ** 13)
    pts = nm.box_lo + (nm.box_hi - nm.box_lo) * u
    errs = M.derivative_errors(nm.spec, pts, step=1e-5)
    assert max(errs.values()) <= 1e-5, errs


@pytest.mark.parametrize("name", NAMES)
def test_builtin_domains_convex(name):
    nm = model_by_name(name)
    d = nm.spec.dim_state
    pts = nm.box_lo + (nm.box_hi - nm.box_lo) * np.random.default_rng(0).random((60, d))
    assert M.convexity_violations(nm.spec, pts) == 0


def test_op_norms():
    A = np.array([[3.0, 0.0], [4.0, 0.0]])
    assert M.op_norm(A) == pytest.approx(5.0)
    ds = np.zeros((1, 1, 1)) + 2.0
    assert M.diffusion_op_norm(ds) == pytest.approx(2.0)
