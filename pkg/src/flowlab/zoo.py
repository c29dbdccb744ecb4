"""Built-in models with closed-form oracles and shipped constants.

Each model comes with a documented sampling box on which its constants pass
:func:`flowlab.checker.certify`. ``cir`` is the exception: its diffusion
derivative blows up at the boundary of ``(0, inf)`` and it is shipped as an
exit-policy stressor, not as a certified example.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import ModelSpec, quadratic_lyapunov, zero_lyapunov


@dataclass(frozen=True)
class Oracle:
    """Closed-form quantities as functions of ``(s, t, x)``; any may be missing."""

    flow_mean: Optional[Callable] = None
    flow_variance: Optional[Callable] = None
    derivative_process: Optional[Callable] = None
    exp_moment: Optional[Callable] = None


@dataclass(frozen=True)
class NamedModel:
    name: str
    spec: ModelSpec
    box_lo: np.ndarray
    box_hi: np.ndarray
    scheme: str
    default_anchor: np.ndarray
    equations: str
    description: str
    certified: bool = True
    oracle: Optional[Oracle] = None
    parameters: dict = field(default_factory=dict)


def _eye_diffusion(dim, scale):
    eye = scale * np.eye(dim)
    return (lambda x: np.broadcast_to(eye, np.shape(x)[:-1] + (dim, dim)),
            lambda x: np.zeros(np.shape(x)[:-1] + (dim, dim, dim)))


# ----------------------------------------------------------------------------
# Ornstein-Uhlenbeck


def _ou_exp_moment(s, t, x, scale):
    """E[exp(scale * |X_t|^2)] for the OU flow started at x at time s."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    m = x * math.exp(-(t - s))
    var = 0.5 * (1.0 - math.exp(-2.0 * (t - s)))
    den = 1.0 - 2.0 * scale * var
    if den <= 0:
        return math.inf
    return float(np.prod(den ** -0.5 * np.exp(scale * m * m / den)))


def ou(dim: int = 1) -> NamedModel:
    drift_jac = -np.eye(dim)
    sig, dsig = _eye_diffusion(dim, 1.0)
    spec = ModelSpec(
        dim_state=dim, dim_noise=dim, horizon=1.0,
        drift=lambda x: -np.asarray(x, dtype=float),
        diffusion=sig,
        drift_jacobian=lambda x: np.broadcast_to(drift_jac, np.shape(x) + (dim,)),
        diffusion_jacobian=dsig,
        lyapunov_V0=quadratic_lyapunov(dim), lyapunov_V1=zero_lyapunov(dim),
        phi=0.0, alpha0=0.5, beta0=dim + 0.25, alpha1=0.0, beta1=0.0,
        p_exp=2.0, q_exp=math.inf, q0=math.inf, q1=math.inf,
        delta=0.5, gamma=1.0, c1=2.0, c2=2.0, c3=2.0, name="ou",
    )
    oracle = Oracle(
        flow_mean=lambda s, t, x: np.asarray(x, dtype=float) * math.exp(-(t - s)),
        flow_variance=lambda s, t, x: np.full(np.shape(x), 0.5 * (1.0 - math.exp(-2.0 * (t - s)))),
        derivative_process=lambda s, t, x, v: np.asarray(v, dtype=float) * math.exp(-(t - s)),
        exp_moment=_ou_exp_moment,
    )
    return NamedModel(
        name="ou", spec=spec, box_lo=np.full(dim, -5.0), box_hi=np.full(dim, 5.0),
        scheme="euler_maruyama", default_anchor=np.ones(dim),
        equations="dX = -X dt + dW",
        description="Ornstein-Uhlenbeck process; every quantity has a Gaussian closed form.",
        oracle=oracle,
    )


# ----------------------------------------------------------------------------
# geometric Brownian motion


def gbm(dim: int = 1, a: float = 0.05, b: float = 0.2) -> NamedModel:
    def diffusion(x):
        x = np.asarray(x, dtype=float)
        return b * x[..., :, None] * np.eye(dim)

    dsig_const = np.zeros((dim, dim, dim))
    for i in range(dim):
        dsig_const[i, i, i] = b
    drift_jac = a * np.eye(dim)
    spec = ModelSpec(
        dim_state=dim, dim_noise=dim, horizon=1.0,
        drift=lambda x: a * np.asarray(x, dtype=float),
        diffusion=diffusion,
        drift_jacobian=lambda x: np.broadcast_to(drift_jac, np.shape(x) + (dim,)),
        diffusion_jacobian=lambda x: np.broadcast_to(dsig_const, np.shape(x)[:-1] + dsig_const.shape),
        lyapunov_V0=zero_lyapunov(dim), lyapunov_V1=zero_lyapunov(dim),
        phi=0.7, p_exp=2.0, q_exp=math.inf, q0=math.inf, q1=math.inf,
        delta=0.5, gamma=1.0, c1=1.0, c2=1.0, c3=1.0, name="gbm",
    )
    oracle = Oracle(
        flow_mean=lambda s, t, x: np.asarray(x, dtype=float) * math.exp(a * (t - s)),
        flow_variance=lambda s, t, x: np.square(np.asarray(x, dtype=float)) * math.exp(2 * a * (t - s))
        * (math.exp(b * b * (t - s)) - 1.0),
        # pathwise: D_t = v * X_t / x componentwise
        derivative_process=lambda s, t, x, v, X: np.asarray(v) * np.asarray(X) / np.asarray(x),
    )
    return NamedModel(
        name="gbm", spec=spec, box_lo=np.full(dim, -3.0), box_hi=np.full(dim, 3.0),
        scheme="euler_maruyama", default_anchor=np.ones(dim),
        equations=f"dX = {a} X dt + {b} diag(X) dW",
        description="Geometric Brownian motion; linear flow, so derivative = X_t / x pathwise.",
        oracle=oracle, parameters={"a": a, "b": b},
    )


# ----------------------------------------------------------------------------
# Ginzburg-Landau (componentwise cubic drift)


def ginzburg_landau(dim: int = 1, noise: float = 0.5) -> NamedModel:
    sig, dsig = _eye_diffusion(dim, noise)

    def drift(x):
        x = np.asarray(x, dtype=float)
        return x - x ** 3

    def drift_jacobian(x):
        x = np.asarray(x, dtype=float)
        return (1.0 - 3.0 * x ** 2)[..., :, None] * np.eye(dim)

    spec = ModelSpec(
        dim_state=dim, dim_noise=dim, horizon=1.0,
        drift=drift, diffusion=sig, drift_jacobian=drift_jacobian, diffusion_jacobian=dsig,
        lyapunov_V0=quadratic_lyapunov(dim), lyapunov_V1=zero_lyapunov(dim),
        phi=1.51, alpha0=3.0, beta0=1.0, alpha1=0.0, beta1=0.0,
        p_exp=3.0, q_exp=12.0, q0=12.0, q1=math.inf,
        delta=0.5, gamma=1.5, c1=2.0, c2=1.0, c3=1.0, name="ginzburg_landau",
    )
    return NamedModel(
        name="ginzburg_landau", spec=spec, box_lo=np.full(dim, -3.0), box_hi=np.full(dim, 3.0),
        scheme="tamed_euler", default_anchor=np.full(dim, 0.5),
        equations=f"dX = (X - X^3) dt + {noise} dW  (componentwise)",
        description="Ginzburg-Landau drift: superlinear, one-sided Lipschitz; integrated with tamed Euler.",
        parameters={"noise": noise},
    )


# ----------------------------------------------------------------------------
# radial double well


def double_well(dim: int = 2, noise: float = 0.5) -> NamedModel:
    sig, dsig = _eye_diffusion(dim, noise)
    eye = np.eye(dim)

    def drift(x):
        x = np.asarray(x, dtype=float)
        return x * (1.0 - np.sum(x * x, axis=-1, keepdims=True))

    def drift_jacobian(x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x * x, axis=-1)[..., None, None]
        return (1.0 - r2) * eye - 2.0 * x[..., :, None] * x[..., None, :]

    spec = ModelSpec(
        dim_state=dim, dim_noise=dim, horizon=1.0,
        drift=drift, diffusion=sig, drift_jacobian=drift_jacobian, diffusion_jacobian=dsig,
        lyapunov_V0=quadratic_lyapunov(dim), lyapunov_V1=zero_lyapunov(dim),
        phi=1.5, alpha0=3.0, beta0=1.0, p_exp=3.0, q_exp=12.0, q0=12.0, q1=math.inf,
        delta=0.5, gamma=1.5, c1=2.0, c2=2.0, c3=2.0, name="double_well",
    )
    return NamedModel(
        name="double_well", spec=spec, box_lo=np.full(dim, -2.0), box_hi=np.full(dim, 2.0),
        scheme="tamed_euler", default_anchor=np.full(dim, 0.5),
        equations=f"dX = X (1 - |X|^2) dt + {noise} dW",
        description="Gradient flow of (|x|^2 - 1)^2 / 4 with additive noise.",
        parameters={"noise": noise},
    )


# ----------------------------------------------------------------------------
# stochastic Lorenz system


def lorenz_stochastic(sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0,
                      noise: float = 0.3) -> NamedModel:
    dim = 3
    sig, dsig = _eye_diffusion(dim, noise)

    def drift(x):
        x = np.asarray(x, dtype=float)
        a, b, c = x[..., 0], x[..., 1], x[..., 2]
        return np.stack([sigma * (b - a), a * (rho - c) - b, a * b - beta * c], axis=-1)

    def drift_jacobian(x):
        x = np.asarray(x, dtype=float)
        a, b, c = x[..., 0], x[..., 1], x[..., 2]
        one = np.ones_like(a)
        rows = [
            np.stack([-sigma * one, sigma * one, 0.0 * one], axis=-1),
            np.stack([rho - c, -one, -a], axis=-1),
            np.stack([b, a, -beta * one], axis=-1),
        ]
        return np.stack(rows, axis=-2)

    spec = ModelSpec(
        dim_state=dim, dim_noise=dim, horizon=1.0,
        drift=drift, diffusion=sig, drift_jacobian=drift_jacobian, diffusion_jacobian=dsig,
        lyapunov_V0=quadratic_lyapunov(dim, 0.01), lyapunov_V1=zero_lyapunov(dim),
        phi=20.0, alpha0=30.0, beta0=1.0, p_exp=2.0, q_exp=math.inf, q0=math.inf, q1=math.inf,
        delta=0.5, gamma=1.0, c1=160.0, c2=20.0, c3=0.5, name="lorenz_stochastic",
    )
    return NamedModel(
        name="lorenz_stochastic", spec=spec,
        box_lo=np.array([-20.0, -30.0, 0.0]), box_hi=np.array([20.0, 30.0, 50.0]),
        scheme="tamed_euler", default_anchor=np.array([1.0, 1.0, 20.0]),
        equations=f"dX = ({sigma}(y-x), x({rho}-z)-y, xy-{beta:.6g}z) dt + {noise} dW",
        description="Lorenz-63 with additive noise; V0 = |x|^2/100 keeps exponential moments finite at T=1.",
        parameters={"sigma": sigma, "rho": rho, "beta": beta, "noise": noise},
    )


# ----------------------------------------------------------------------------
# Cox-Ingersoll-Ross


def cir(kappa: float = 1.0, theta: float = 1.0, xi: float = 0.5) -> NamedModel:
    def diffusion(x):
        x = np.asarray(x, dtype=float)
        return xi * np.sqrt(np.maximum(x, 0.0))[..., None]

    def diffusion_jacobian(x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            return (0.5 * xi / np.sqrt(np.maximum(x, 0.0)))[..., None, None]

    spec = ModelSpec(
        dim_state=1, dim_noise=1, horizon=1.0,
        drift=lambda x: kappa * (theta - np.asarray(x, dtype=float)),
        diffusion=diffusion,
        drift_jacobian=lambda x: np.full(np.shape(x) + (1,), -kappa),
        diffusion_jacobian=diffusion_jacobian,
        lyapunov_V0=quadratic_lyapunov(1), lyapunov_V1=zero_lyapunov(1),
        phi=0.0, alpha0=1.0, beta0=1.0, p_exp=2.0, q_exp=math.inf, q0=math.inf, q1=math.inf,
        delta=0.5, gamma=1.0, c1=2.0, c2=2.0, c3=2.0,
        domain_cal_O=lambda x: np.asarray(x, dtype=float)[..., 0] > 0.0,
        name="cir",
    )
    oracle = Oracle(
        flow_mean=lambda s, t, x: theta + (np.asarray(x, dtype=float) - theta) * math.exp(-kappa * (t - s)),
    )
    return NamedModel(
        name="cir", spec=spec, box_lo=np.array([0.1]), box_hi=np.array([3.0]),
        scheme="euler_maruyama", default_anchor=np.array([0.5]),
        equations=f"dX = {kappa}({theta} - X) dt + {xi} sqrt(X) dW  on (0, inf)",
        description="CIR square-root diffusion; sigma' is unbounded near 0, so it is NOT certified. "
                    "Shipped to exercise a domain strictly inside R and the exit policy.",
        certified=False, oracle=oracle,
        parameters={"kappa": kappa, "theta": theta, "xi": xi},
    )


_REGISTRY = {
    "ou": ou,
    "gbm": gbm,
    "ginzburg_landau": ginzburg_landau,
    "double_well": double_well,
    "lorenz_stochastic": lorenz_stochastic,
    "cir": cir,
}

NAMES = tuple(_REGISTRY)


def model_by_name(name: str, **params) -> NamedModel:
    """Look up a built-in model; keyword arguments go to its constructor (e.g. ``dim``)."""
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; available: {', '.join(NAMES)}") from None
    return factory(**params)


# Output of fit_constants for ginzburg_landau on its box (grid sampler,
# 256 points, seed 0), frozen as regression values. The shipped constants
# round these up.
FIT_REGRESSION = {
    "ginzburg_landau": {
        "region": {"n_points": 256, "sampler": "grid", "seed": 0},
        "values": {
            "c1_min": 0.7589466384404111,
            "c2_min": 0.353552696475292,
            "c3_min": 0.348480045988036,
            "alpha0_min": 0.050252844130327164,
            "beta0_min": 0.2499307575340335,
            "alpha1_min": 0.0,
            "beta1_min": 0.0,
            "phi_min": 1.477325766996225,
        },
    },
}
