"""SDE model container and pointwise evaluation of the coefficient hypotheses.

All coefficient callables are expected to broadcast over leading axes:
``drift(x)`` maps ``(..., d) -> (..., d)``, ``diffusion(x)`` maps
``(..., d) -> (..., d, m)``, ``drift_jacobian(x)`` maps ``(..., d) -> (..., d, d)``
and ``diffusion_jacobian(x)`` maps ``(..., d) -> (..., d, m, d)`` with
``diffusion_jacobian(x) @ h`` (contracting the last axis) the directional
derivative of ``diffusion`` along ``h``. Lyapunov values map ``(..., d) -> (...)``.
They must be pure and reentrant; a :class:`ModelSpec` is immutable and can be
shared across threads.

Every ``*_margin`` function returns ``rhs - lhs`` of the corresponding
inequality, so a nonnegative value means the hypothesis holds at that point.
Inputs may be single points or stacked batches of points.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Union

import numpy as np

Array = np.ndarray
PhiLike = Union[float, Callable[[Array], Array]]

DEFAULT_NODES = 8


class FlowlabError(Exception):
    """Base class for errors raised by flowlab."""


class DomainError(FlowlabError, ValueError):
    """A point, time or sample lies outside the admissible set."""


class DegeneratePairError(DomainError):
    """A two-point condition was evaluated at coinciding points."""


class EvaluationError(FlowlabError, FloatingPointError):
    """A coefficient or Lyapunov function returned a non-finite value."""

    def __init__(self, message, x=None):
        super().__init__(message)
        self.x = None if x is None else np.asarray(x)


@dataclass(frozen=True)
class Lyapunov:
    """A C^2 function together with its gradient and Hessian."""

    value: Callable[[Array], Array]
    gradient: Callable[[Array], Array]
    hessian: Callable[[Array], Array]


def zero_lyapunov(dim: int) -> Lyapunov:
    return Lyapunov(
        value=lambda x: np.zeros(np.shape(x)[:-1]),
        gradient=lambda x: np.zeros(np.shape(x)),
        hessian=lambda x: np.zeros(np.shape(x) + (dim,)),
    )


def quadratic_lyapunov(dim: int, scale: float = 1.0) -> Lyapunov:
    """``V(x) = scale * |x|^2``."""
    eye = np.eye(dim)
    return Lyapunov(
        value=lambda x: scale * np.sum(np.square(x), axis=-1),
        gradient=lambda x: 2.0 * scale * np.asarray(x, dtype=float),
        hessian=lambda x: np.broadcast_to(2.0 * scale * eye, np.shape(x) + (dim,)),
    )


def _whole_space(x):
    return np.ones(np.shape(x)[:-1], dtype=bool)


def _zero_vbar(t, x):
    return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(x)[:-1]))


def inverse(q: float) -> float:
    """1/q on the extended reals (1/inf = 0)."""
    return 0.0 if math.isinf(q) else 1.0 / q


@dataclass(frozen=True)
class ModelSpec:
    """Coefficients, Lyapunov data and scalar constants of a stochastic flow.

    ``horizon_weighting`` selects how the Lyapunov terms on the right of the
    monotonicity conditions are normalised: ``"T"`` divides the V0 term by the
    horizon, ``"T-t"`` divides both Lyapunov terms by the remaining time.
    ``alpha_unsubscripted`` records how a bare alpha in the flow Hoelder bound
    is resolved; only ``"per_index"`` is implemented.
    """

    dim_state: int
    dim_noise: int
    horizon: float
    drift: Callable[[Array], Array]
    diffusion: Callable[[Array], Array]
    drift_jacobian: Callable[[Array], Array]
    diffusion_jacobian: Callable[[Array], Array]
    lyapunov_V0: Lyapunov
    lyapunov_V1: Lyapunov
    vbar: Callable[[Array, Array], Array] = _zero_vbar
    phi: PhiLike = 0.0
    alpha0: float = 0.0
    alpha1: float = 0.0
    beta0: float = 0.0
    beta1: float = 0.0
    p_exp: float = 2.0
    q_exp: float = math.inf
    q0: float = math.inf
    q1: float = math.inf
    delta: float = 0.5
    gamma: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    c3: float = 1.0
    domain_O: Callable[[Array], Array] = _whole_space
    domain_cal_O: Callable[[Array], Array] = _whole_space
    horizon_weighting: str = "T"
    alpha_unsubscripted: str = "per_index"
    name: str = "custom"

    def __post_init__(self):
        if self.dim_state < 1 or self.dim_noise < 1:
            raise ValueError("dimensions must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.p_exp < 2:
            raise ValueError(f"p_exp must be >= 2, got {self.p_exp}")
        if not self.q_exp > 2 * self.p_exp:
            raise ValueError(f"q_exp must exceed 2*p_exp, got q={self.q_exp}, p={self.p_exp}")
        if self.q0 <= 0 or self.q1 <= 0:
            raise ValueError("q0 and q1 must be positive")
        lhs = inverse(self.q0) + inverse(self.q1)
        rhs = inverse(self.q_exp)
        if abs(lhs - rhs) > 1e-12 * max(abs(rhs), 1e-300) and not (lhs == rhs == 0.0):
            raise ValueError(f"1/q0 + 1/q1 = {lhs!r} differs from 1/q = {rhs!r}")
        if not self.delta > 0 or not self.gamma > 0:
            raise ValueError("delta and gamma must be positive")
        if self.alpha0 < 0 or self.alpha1 < 0:
            raise ValueError("alpha0 and alpha1 must be nonnegative")
        r = self.moment_exponent
        if r < max(2.0, 1.0 / self.gamma) * (1 - 1e-12):
            raise ValueError(f"pq/(p+q) = {r} must be >= max(2, 1/gamma)")
        if self.horizon_weighting not in ("T", "T-t"):
            raise ValueError("horizon_weighting must be 'T' or 'T-t'")
        if self.alpha_unsubscripted != "per_index":
            raise ValueError("only alpha_unsubscripted='per_index' is supported")

    @property
    def moment_exponent(self) -> float:
        """pq/(p+q), equal to p when q is infinite."""
        if math.isinf(self.q_exp):
            return float(self.p_exp)
        return self.p_exp * self.q_exp / (self.p_exp + self.q_exp)

    @property
    def flags(self) -> list[str]:
        out = []
        if self.moment_exponent <= 2 * self.dim_state + 6:
            out.append(
                f"pq/(p+q)={self.moment_exponent:g} <= 2d+6={2 * self.dim_state + 6}: "
                "C^1 existence hypothesis not met (checks still run)"
            )
        return out

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)

    def lyapunov(self, which) -> Lyapunov:
        return self.lyapunov_V1 if _index(which) == 1 else self.lyapunov_V0

    def alpha(self, which) -> float:
        return self.alpha1 if _index(which) == 1 else self.alpha0

    def beta(self, which) -> float:
        return self.beta1 if _index(which) == 1 else self.beta0

    def q_index(self, which) -> float:
        return self.q1 if _index(which) == 1 else self.q0

    def phi_at(self, t):
        if callable(self.phi):
            return np.asarray(self.phi(np.asarray(t, dtype=float)), dtype=float)
        return np.full(np.shape(t), float(self.phi))

    def phi_integral(self, a: float, b: float) -> float:
        """Integral of phi over [a, b]."""
        if b <= a:
            return 0.0
        if callable(self.phi):
            from scipy.integrate import quad

            return float(quad(lambda r: float(self.phi_at(r)), a, b, limit=200)[0])
        return float(self.phi) * (b - a)

    def constants(self) -> dict:
        keys = ("alpha0", "alpha1", "beta0", "beta1", "p_exp", "q_exp", "q0", "q1",
                "delta", "gamma", "c1", "c2", "c3", "horizon")
        out = {k: float(getattr(self, k)) for k in keys}
        out["phi"] = "callable" if callable(self.phi) else float(self.phi)
        return out


def _index(which) -> int:
    if which in (0, "V0", "v0"):
        return 0
    if which in (1, "V1", "v1"):
        return 1
    raise ValueError(f"which_V must be 0/'V0' or 1/'V1', got {which!r}")


# ----------------------------------------------------------------------------
# helpers

def _as_points(model: ModelSpec, x) -> Array:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (model.dim_state,):
        raise ValueError(f"expected trailing dimension {model.dim_state}, got shape {x.shape}")
    return x


def _require_domain(model: ModelSpec, x, what="x"):
    inside = np.asarray(model.domain_cal_O(x), dtype=bool)
    if not np.all(inside):
        bad = np.asarray(x)[~inside] if inside.ndim else np.asarray(x)
        raise DomainError(f"{what} outside the domain: {np.asarray(bad).reshape(-1, model.dim_state)[0]}")


def _finite(value, x, what):
    value = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(value)):
        raise EvaluationError(f"non-finite {what} at x={np.asarray(x).tolist()}", x)
    return value


def gauss_legendre(nodes: int):
    """Nodes and weights of the Gauss-Legendre rule on [0, 1]."""
    if nodes < 1:
        raise ValueError("nodes must be >= 1")
    xi, w = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * (xi + 1.0), 0.5 * w


def op_norm(mat) -> Array:
    """Largest singular value over the last two axes."""
    mat = np.asarray(mat, dtype=float)
    return np.linalg.norm(mat, ord=2, axis=(-2, -1))


def diffusion_op_norm(dsig) -> Array:
    """Norm of h -> sigma'(.) h as a map from R^d into the HS (Frobenius) space."""
    dsig = np.asarray(dsig, dtype=float)
    d, m, d2 = dsig.shape[-3:]
    return op_norm(dsig.reshape(dsig.shape[:-3] + (d * m, d2)))


def apply_direction(dsig, h) -> Array:
    """``sigma'(x) h`` as a (..., d, m) array."""
    return np.einsum("...ijk,...k->...ij", dsig, h)


# ----------------------------------------------------------------------------
# operations

def generator_apply(model: ModelSpec, which_V, x) -> Array:
    """``<grad V(x), mu(x)> + 1/2 tr(sigma sigma^T Hess V)(x)``."""
    x = _as_points(model, x)
    _require_domain(model, x)
    lyap = model.lyapunov(which_V)
    mu = _finite(model.drift(x), x, "drift")
    sig = _finite(model.diffusion(x), x, "diffusion")
    grad = _finite(lyap.gradient(x), x, "Lyapunov gradient")
    hess = _finite(lyap.hessian(x), x, "Lyapunov Hessian")
    first = np.einsum("...i,...i->...", grad, mu)
    # tr(sigma sigma^T H) = sum_ijk sigma_ik sigma_jk H_ij
    second = 0.5 * np.einsum("...ik,...jk,...ij->...", sig, sig, hess)
    return first + second


def averaged_jacobian(model: ModelSpec, x, y, which="drift", nodes: int = DEFAULT_NODES) -> Array:
    """Gauss-Legendre approximation of the Jacobian averaged along [y, x].

    Returns ``(..., d, d)`` for ``which="drift"`` and the ``(..., d, m, d)``
    derivative tensor for ``which="diffusion"``. Coinciding endpoints return the
    pointwise Jacobian unchanged.
    """
    x = _as_points(model, x)
    y = _as_points(model, y)
    x, y = np.broadcast_arrays(x, y)
    if which == "drift":
        jac = model.drift_jacobian
    elif which == "diffusion":
        jac = model.diffusion_jacobian
    else:
        raise ValueError("which must be 'drift' or 'diffusion'")
    lam, w = gauss_legendre(nodes)
    shape = (nodes,) + (1,) * (x.ndim - 1) + (1,)
    seg = lam.reshape(shape) * x + (1.0 - lam.reshape(shape)) * y
    _require_domain(model, seg, "segment point")
    vals = _finite(jac(seg), seg, f"{which} Jacobian")
    wshape = (nodes,) + (1,) * (vals.ndim - 1)
    out = np.sum(w.reshape(wshape) * vals, axis=0)
    same = np.all(x == y, axis=-1)
    if np.any(same):
        exact = _finite(jac(x), x, f"{which} Jacobian")
        out = np.where(same.reshape(same.shape + (1,) * (out.ndim - same.ndim)), exact, out)
    return out


def _lyapunov_weight(model: ModelSpec, t, x, y) -> Array:
    """phi(t) + Lyapunov terms on the right of the monotonicity conditions."""
    t = np.asarray(t, dtype=float)
    T = model.horizon
    if model.horizon_weighting == "T-t":
        if np.any(t >= T):
            raise DomainError("t must be < T with the T-t weighting")
        w0 = 1.0 / (T - t)
        w1 = 1.0 / (T - t)
    else:
        w0 = 1.0 / T
        w1 = 1.0
    v0 = model.lyapunov_V0.value
    out = model.phi_at(t)
    iq0 = inverse(model.q0)
    if iq0:
        out = out + w0 * iq0 * (v0(x) + v0(y)) / (2.0 * np.exp(model.alpha0 * t))
    iq1 = inverse(model.q1)
    if iq1:
        out = out + w1 * iq1 * (model.vbar(t, x) + model.vbar(t, y)) / (2.0 * np.exp(model.alpha1 * t))
    return out


def _check_time(model: ModelSpec, t, strict: bool):
    t = np.asarray(t, dtype=float)
    bad = (t >= model.horizon) if strict else (t > model.horizon)
    if np.any(bad) or np.any(t < 0):
        raise DomainError(f"time outside [0, T{')' if strict else ']'}: {t}")
    return t


def monotonicity_margin_C1(model: ModelSpec, t, x, y, h, nodes: int = DEFAULT_NODES) -> Array:
    """Margin of the C^1 local monotonicity hypothesis at ``(t, x, y, h)``.

    The +delta inside the averaged drift Jacobian is read as ``delta * Id``.
    """
    t = _check_time(model, t, strict=True)
    x = _as_points(model, x)
    y = _as_points(model, y)
    h = np.asarray(h, dtype=float)
    hh = np.sum(h * h, axis=-1)
    if np.any(hh == 0):
        raise DomainError("direction h must be nonzero")
    a = averaged_jacobian(model, x, y, "drift", nodes)
    s = averaged_jacobian(model, x, y, "diffusion", nodes)
    sh = apply_direction(s, h)
    delta, p = model.delta, model.p_exp
    lhs = (np.einsum("...i,...ij,...j->...", h, a, h) + delta * hh
           + 0.5 * (1.0 + delta) * np.sum(sh * sh, axis=(-2, -1))
           + (p - 1.0 + p * delta) * np.sum(np.einsum("...i,...ij->...j", h, sh) ** 2, axis=-1) / hh)
    rhs = hh * _lyapunov_weight(model, t, x, y)
    return rhs - lhs


def monotonicity_margin_C0(model: ModelSpec, t, x, y) -> Array:
    """Margin of the difference-based (C^0) monotonicity condition."""
    t = _check_time(model, t, strict=model.horizon_weighting == "T-t")
    x = _as_points(model, x)
    y = _as_points(model, y)
    _require_domain(model, x)
    _require_domain(model, y, "y")
    dx = x - y
    nn = np.sum(dx * dx, axis=-1)
    if np.any(nn == 0):
        raise DegeneratePairError("x and y coincide")
    dmu = _finite(model.drift(x), x, "drift") - _finite(model.drift(y), y, "drift")
    dsig = _finite(model.diffusion(x), x, "diffusion") - _finite(model.diffusion(y), y, "diffusion")
    delta, p = model.delta, model.p_exp
    lhs = (np.sum(dx * dmu, axis=-1) + 0.5 * np.sum(dsig * dsig, axis=(-2, -1))
           + (p - 1.0 + p * delta) * np.sum(np.einsum("...i,...ij->...j", dx, dsig) ** 2, axis=-1) / nn)
    rhs = nn * _lyapunov_weight(model, t, x, y)
    return rhs - lhs


def exp_moment_margin(model: ModelSpec, i, t, x) -> Array:
    """Margin of ``G V_i + |sigma^T grad V_i|^2 / (2 e^{alpha_i t}) + 1_{i=1} Vbar <= alpha_i V_i + beta_i``."""
    i = _index(i)
    t = _check_time(model, t, strict=False)
    x = _as_points(model, x)
    lyap = model.lyapunov(i)
    alpha, beta = model.alpha(i), model.beta(i)
    gen = generator_apply(model, i, x)
    sig = model.diffusion(x)
    st_grad = np.einsum("...ij,...i->...j", sig, lyap.gradient(x))
    with np.errstate(over="ignore"):
        lhs = gen + np.sum(st_grad * st_grad, axis=-1) / (2.0 * np.exp(alpha * t))
    if i == 1:
        lhs = lhs + _finite(model.vbar(t, x), x, "vbar")
    rhs = alpha * _finite(lyap.value(x), x, "Lyapunov value") + beta
    return rhs - lhs


class GrowthMargins(NamedTuple):
    coeff_growth: Array
    jacobian_growth: Array
    jacobian_lipschitz: Array


def coeff_growth_margin(model: ModelSpec, x) -> Array:
    x = _as_points(model, x)
    _require_domain(model, x)
    mu = _finite(model.drift(x), x, "drift")
    sig = _finite(model.diffusion(x), x, "diffusion")
    size = np.maximum(np.linalg.norm(mu, axis=-1), np.sqrt(np.sum(sig * sig, axis=(-2, -1))))
    return model.c1 * (1.0 + model.lyapunov_V0.value(x)) ** model.gamma - size


def jacobian_growth_margin(model: ModelSpec, x, y, nodes: int = DEFAULT_NODES) -> Array:
    x = _as_points(model, x)
    y = _as_points(model, y)
    a = averaged_jacobian(model, x, y, "drift", nodes)
    s = averaged_jacobian(model, x, y, "diffusion", nodes)
    size = np.maximum(op_norm(a), diffusion_op_norm(s))
    v0 = model.lyapunov_V0.value
    return model.c2 * (2.0 + v0(x) + v0(y)) ** model.gamma - size


def jacobian_lipschitz_margin(model: ModelSpec, lam, x1, x2, x3, x4) -> Array:
    """Margin of the local Lipschitz bound on the drift Jacobian for a quadruple."""
    lam = np.asarray(lam, dtype=float)
    pts = [_as_points(model, z) for z in (x1, x2, x3, x4)]
    for z in pts:
        _require_domain(model, z)
    lam_ = lam[..., None]
    a = lam_ * pts[0] + (1.0 - lam_) * pts[1]
    b = lam_ * pts[2] + (1.0 - lam_) * pts[3]
    diff = _finite(model.drift_jacobian(a), a, "drift Jacobian") - _finite(model.drift_jacobian(b), b, "drift Jacobian")
    comb = lam_ * (pts[0] - pts[2]) + (1.0 - lam_) * (pts[1] - pts[3])
    v0 = model.lyapunov_V0.value
    weight = (4.0 + sum(v0(z) for z in pts)) ** model.gamma
    return model.c3 * np.linalg.norm(comb, axis=-1) * weight - op_norm(diff)


def growth_margins(model: ModelSpec, x, y, nodes: int = DEFAULT_NODES) -> GrowthMargins:
    """The three growth margins; the Lipschitz one at lambda=1 on (x, x, y, y)."""
    return GrowthMargins(
        coeff_growth=coeff_growth_margin(model, x),
        jacobian_growth=jacobian_growth_margin(model, x, y, nodes),
        jacobian_lipschitz=jacobian_lipschitz_margin(model, 1.0, x, x, y, y),
    )


# ----------------------------------------------------------------------------
# self-consistency checks on user-supplied derivatives

def _central_difference(fun, x, step):
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    cols = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = step
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2.0 * step))
    return np.stack(cols, axis=-1)


def _rel_error(approx, exact):
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    axes = tuple(range(1, exact.ndim)) if exact.ndim > 1 else None
    num = np.max(np.abs(approx - exact), axis=axes)
    den = np.maximum(np.max(np.abs(exact), axis=axes), 1.0)
    return float(np.max(num / den))


def derivative_errors(model: ModelSpec, points, step: float = 1e-5) -> dict:
    """Relative errors between central differences and the supplied derivatives.

    Points are a ``(n, d)`` array. Errors are normalised by ``max(1, |exact|)``.
    """
    pts = _as_points(model, np.atleast_2d(points))
    out = {
        "drift_jacobian": _rel_error(_central_difference(model.drift, pts, step), model.drift_jacobian(pts)),
        "diffusion_jacobian": _rel_error(_central_difference(model.diffusion, pts, step),
                                         model.diffusion_jacobian(pts)),
    }
    for name in ("V0", "V1"):
        lyap = model.lyapunov(name)
        out[f"{name}_gradient"] = _rel_error(_central_difference(lyap.value, pts, step), lyap.gradient(pts))
        out[f"{name}_hessian"] = _rel_error(_central_difference(lyap.gradient, pts, step), lyap.hessian(pts))
    return out


def convexity_violations(model: ModelSpec, points, lambdas=(0.25, 0.5, 0.75)) -> int:
    """Number of (x, y, lambda) with x, y in the domain but the combination outside."""
    pts = _as_points(model, np.atleast_2d(points))
    inside = np.asarray(model.domain_cal_O(pts), dtype=bool)
    pts = pts[inside]
    count = 0
    for lam in lambdas:
        comb = lam * pts[:, None, :] + (1.0 - lam) * pts[None, :, :]
        count += int(np.sum(~np.asarray(model.domain_cal_O(comb), dtype=bool)))
    return count
