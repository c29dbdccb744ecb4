"""Empirical moments of simulated flows compared against closed-form bounds.

Each ``check_*`` function returns a :class:`BoundReport`. The right-hand side
is a deterministic function of the model constants and the echoed inputs;
the left-hand side is a Monte Carlo estimate with a 99% interval, and a bound
counts as satisfied when the upper end of that interval does not exceed it.
A Monte Carlo check can only falsify a bound at confidence, never prove it.

Polynomial functionals use CLT intervals. Exponential functionals are heavy
tailed, so they are evaluated in log space and bootstrapped (400 resamples).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .checker import format_float
from .model import ModelSpec, inverse
from .sim import ConfigurationError, DerivativeEnsemble, PathEnsemble

Z99 = float(norm.ppf(0.995))
N_BOOTSTRAP = 400
LOG_OVERFLOW = math.log(1e300)
# relative slack granted to comparisons that hold with equality in exact arithmetic
ROUNDOFF = 1e-12

BOUND_IDS = (
    "lyapunov",
    "exp_moment",
    "poly_moment",
    "multiple_exp",
    "gronwall",
    "flow_holder",
    "derivative_moment",
)


@dataclass
class BoundReport:
    bound_id: str
    lhs: float
    ci_lo: float
    ci_hi: float
    rhs: float
    satisfied: bool
    inputs: dict = field(default_factory=dict)
    n_effective: int = 0
    method: str = "clt"
    se: float = math.nan
    log_lhs: Optional[float] = None
    flags: list = field(default_factory=list)
    series: Optional[dict] = None

    @property
    def slack(self) -> float:
        return self.rhs - self.ci_hi

    def as_dict(self) -> dict:
        out = {
            "bound_id": self.bound_id,
            "lhs": format_float(self.lhs),
            "ci_lo": format_float(self.ci_lo),
            "ci_hi": format_float(self.ci_hi),
            "rhs": format_float(self.rhs),
            "se": format_float(self.se),
            "satisfied": self.satisfied,
            "n_effective": self.n_effective,
            "method": self.method,
            "flags": list(self.flags),
            "inputs": _jsonable(self.inputs),
        }
        if self.log_lhs is not None:
            out["log_lhs"] = format_float(self.log_lhs)
        if self.series is not None:
            out["series"] = _jsonable(self.series)
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def reports_to_json(reports: Sequence[BoundReport]) -> str:
    return json.dumps([r.as_dict() for r in reports], indent=2, sort_keys=True)


def write_bound_table(reports: Sequence[BoundReport], path) -> None:
    """RFC-4180 CSV with one row per report."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["bound_id", "lhs", "ci_lo", "ci_hi", "rhs", "satisfied"])
        for r in reports:
            w.writerow([r.bound_id, format_float(r.lhs), format_float(r.ci_lo), format_float(r.ci_hi),
                        format_float(r.rhs), str(bool(r.satisfied)).lower()])


# ----------------------------------------------------------------------------
# statistics


def empirical_norm(samples, r: float) -> float:
    """``(mean |X|^r)^(1/r)`` over the sample; the sample maximum for r = inf.

    ``samples`` is ``(n,)`` for scalars or ``(n, d)`` for vectors.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] == 0:
        raise ValueError("empty sample")
    if not (r > 0):
        raise ValueError("r must be positive")
    mags = np.abs(samples) if samples.ndim == 1 else np.linalg.norm(samples.reshape(len(samples), -1), axis=-1)
    if math.isinf(r):
        return float(np.max(mags))
    top = float(np.max(mags))
    if top == 0.0:
        return 0.0
    # scale out the maximum so large r does not overflow
    return top * float(np.mean((mags / top) ** r)) ** (1.0 / r)


def _norm_with_ci(mags, r):
    """Power mean of nonnegative values with a CLT interval on the inner mean."""
    mags = np.asarray(mags, dtype=float)
    n = mags.size
    if math.isinf(r):
        top = float(np.max(mags))
        return top, top, top, 0.0
    top = float(np.max(mags))
    if top == 0.0:
        return 0.0, 0.0, 0.0, 0.0
    w = (mags / top) ** r
    m = float(np.mean(w))
    se = float(np.std(w, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    lo = max(m - Z99 * se, 0.0)
    hi = m + Z99 * se
    f = lambda v: top * v ** (1.0 / r)
    # delta-method standard error of the transformed estimate
    se_norm = top * (1.0 / r) * m ** (1.0 / r - 1.0) * se if m > 0 else 0.0
    return f(m), f(lo), f(hi), se_norm


def _within(hi, rhs) -> bool:
    return bool(hi <= rhs + ROUNDOFF * abs(rhs))


def _mean_with_ci(values):
    values = np.asarray(values, dtype=float)
    n = values.size
    m = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return m, m - Z99 * se, m + Z99 * se, se


def log_mean_exp(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(logsumexp(values) - math.log(values.size))


def _bootstrap(stat, n, seed, n_boot=N_BOOTSTRAP):
    gen = np.random.default_rng(seed)
    out = np.empty(n_boot)
    for b in range(n_boot):
        out[b] = stat(gen.integers(0, n, n))
    return out


def _log_mean_exp_ci(values, seed):
    values = np.asarray(values, dtype=float)
    est = log_mean_exp(values)
    if values.size < 2 or np.all(values == values[0]):
        return est, est, est, 0.0
    boots = _bootstrap(lambda idx: log_mean_exp(values[idx]), values.size, seed)
    lo, hi = np.quantile(boots, [0.005, 0.995])
    return est, float(lo), float(hi), float(np.std(boots, ddof=1))


def _exp_integral(alpha: float, a: float, b: float) -> float:
    """Integral of exp(-alpha r) over [a, b]."""
    if b <= a:
        return 0.0
    if alpha == 0:
        return b - a
    return (math.exp(-alpha * a) - math.exp(-alpha * b)) / alpha


def _exp_ramp_integral(alpha: float, a: float, b: float) -> float:
    """Integral of (r - a) exp(-alpha r) over [a, b]."""
    if b <= a:
        return 0.0
    if alpha == 0:
        return 0.5 * (b - a) ** 2
    return -(b - a) * math.exp(-alpha * b) / alpha - (math.exp(-alpha * b) - math.exp(-alpha * a)) / alpha ** 2


def _times_between(ensemble_times, s, t):
    times = np.asarray(ensemble_times)
    tol = 1e-12 * max(1.0, abs(t))
    mask = (times >= s - tol) & (times <= t + tol)
    idx = np.flatnonzero(mask)
    if idx.size == 0 or abs(times[idx[0]] - s) > tol or abs(times[idx[-1]] - t) > tol:
        raise ConfigurationError(f"record times must include both {s!r} and {t!r}")
    return idx


def _trapezoid(values, times):
    """Trapezoid rule along the last axis of ``values``."""
    if values.shape[-1] < 2:
        return np.zeros(values.shape[:-1])
    dt = np.diff(times)
    return np.sum(0.5 * (values[..., 1:] + values[..., :-1]) * dt, axis=-1)


def _valid_states(ensemble: PathEnsemble, anchor: int):
    mask = ensemble.valid(anchor)
    return ensemble.states[anchor][mask], int(mask.sum())


def _anchor_start(ensemble, anchor):
    return float(ensemble.anchor_s[anchor]), ensemble.anchor_x[anchor]


# ----------------------------------------------------------------------------
# Lyapunov / moment bounds


def check_lyapunov_bound(model: ModelSpec, ensemble: PathEnsemble, which_V=0, alpha: Optional[float] = None,
                         anchor: int = 0, t: Optional[float] = None) -> BoundReport:
    """``E[V(X_t)] <= exp(alpha (t - s)) V(x)`` for the flow started at ``(s, x)``."""
    lyap = model.lyapunov(which_V)
    alpha = model.alpha(which_V) if alpha is None else float(alpha)
    s, x = _anchor_start(ensemble, anchor)
    t = float(ensemble.record_times[-1]) if t is None else float(t)
    k = ensemble.time_index(t)
    states, n = _valid_states(ensemble, anchor)
    vals = lyap.value(states[:, k, :])
    m, lo, hi, se = _mean_with_ci(vals)
    rhs = math.exp(alpha * (t - s)) * float(lyap.value(x))
    flags = []
    if n < ensemble.n_paths:
        flags.append(f"{ensemble.n_paths - n} exited paths rejected")
    return BoundReport("lyapunov", m, lo, hi, rhs, _within(hi, rhs),
                       {"anchor_s": s, "anchor_x": x, "t": t, "alpha": alpha, "which_V": str(which_V)},
                       n_effective=n, method="clt", se=se, flags=flags)


def check_exp_moment_bound(model: ModelSpec, ensemble: PathEnsemble, anchor: int = 0, s: Optional[float] = None,
                           which_V=0, alpha: Optional[float] = None, beta: Optional[float] = None,
                           bootstrap_seed: int = 0) -> BoundReport:
    """Exponential moment estimate over ``[s, t_end]`` (t_end = last record time).

    ``lhs = E exp(V(X_T) / e^{alpha T} + int_s^T Vbar(r, X_r) / e^{alpha r} dr)`` with the
    Vbar term present for ``which_V = 1`` only; ``rhs`` is the same functional of
    the state at ``s`` plus ``int_s^T beta e^{-alpha r} dr``.
    """
    i = 1 if which_V in (1, "V1", "v1") else 0
    lyap = model.lyapunov(i)
    alpha = model.alpha(i) if alpha is None else float(alpha)
    beta = model.beta(i) if beta is None else float(beta)
    s0, x = _anchor_start(ensemble, anchor)
    s = s0 if s is None else float(s)
    if s < s0 - 1e-12:
        raise ConfigurationError("s precedes the anchor start time")
    T = float(ensemble.record_times[-1])
    idx = _times_between(ensemble.record_times, s, T)
    times = ensemble.record_times[idx]
    states, n = _valid_states(ensemble, anchor)
    L = lyap.value(states[:, -1, :]) / math.exp(alpha * T)
    if i == 1:
        vb = model.vbar(times[None, :], states[:, idx, :]) / np.exp(alpha * times)[None, :]
        L = L + _trapezoid(vb, times)
    log_lhs, lo, hi, se = _log_mean_exp_ci(L, bootstrap_seed)
    beta_part = beta * _exp_integral(alpha, s, T)
    if abs(s - s0) <= 1e-12:
        log_rhs = float(lyap.value(x)) / math.exp(alpha * s) + beta_part
        deterministic_start = True
    else:
        log_rhs = log_mean_exp(lyap.value(states[:, idx[0], :]) / math.exp(alpha * s)) + beta_part
        deterministic_start = False
    flags = []
    lhs = math.exp(log_lhs) if log_lhs < LOG_OVERFLOW else math.inf
    if not math.isfinite(lhs):
        flags.append("overflow: lhs reported in log space")
    ok = bool(np.isfinite(hi)) and _within(hi, log_rhs)
    rhs = math.exp(log_rhs) if log_rhs < LOG_OVERFLOW else math.inf
    return BoundReport("exp_moment", lhs, math.exp(min(lo, LOG_OVERFLOW)), math.exp(min(hi, LOG_OVERFLOW)), rhs, ok,
                       {"anchor_s": s0, "anchor_x": x, "s": s, "T": T, "alpha": alpha, "beta": beta,
                        "which_V": i, "deterministic_start": deterministic_start, "log_rhs": log_rhs},
                       n_effective=n, method="bootstrap", se=se, log_lhs=log_lhs, flags=flags)


def check_poly_moment_bound(model: ModelSpec, ensemble: PathEnsemble, anchor: int = 0, s: Optional[float] = None,
                            t: Optional[float] = None, r_exp: float = 2.0, which_V=0) -> BoundReport:
    """``|| 1 + V(X_t) ||_{L^r} <= e^{alpha t} (r + int_s^t beta e^{-alpha u} du + e^{-alpha s} ||V(X_s)||_{L^r})``."""
    if r_exp < 1:
        raise ValueError("r_exp must be >= 1")
    i = 1 if which_V in (1, "V1", "v1") else 0
    lyap = model.lyapunov(i)
    alpha, beta = model.alpha(i), model.beta(i)
    s0, x = _anchor_start(ensemble, anchor)
    s = s0 if s is None else float(s)
    t = float(ensemble.record_times[-1]) if t is None else float(t)
    states, n = _valid_states(ensemble, anchor)
    vt = 1.0 + lyap.value(states[:, ensemble.time_index(t), :])
    lhs, lo, hi, se = _norm_with_ci(vt, r_exp)
    if abs(s - s0) <= 1e-12:
        vs = float(lyap.value(x))
    else:
        vs = empirical_norm(lyap.value(states[:, ensemble.time_index(s), :]), r_exp)
    rhs = math.exp(alpha * t) * (r_exp + beta * _exp_integral(alpha, s, t) + math.exp(-alpha * s) * vs)
    return BoundReport("poly_moment", lhs, lo, hi, rhs, _within(hi, rhs),
                       {"anchor_s": s0, "anchor_x": x, "s": s, "t": t, "r_exp": r_exp, "which_V": i,
                        "alpha": alpha, "beta": beta},
                       n_effective=n, method="clt", se=se)


def check_multiple_exp_bound(model: ModelSpec, processes, s: Optional[float] = None, q0: Optional[float] = None,
                             q1: Optional[float] = None, phi=None, bootstrap_seed: int = 0) -> BoundReport:
    """Joint exponential bound for four flows driven by the same noise.

    ``processes`` is a sequence of four ``(ensemble, anchor)`` pairs sharing
    paths (typically the same ensemble). ``phi`` defaults to the model's.
    """
    processes = list(processes)
    if len(processes) != 4:
        raise ValueError("exactly four processes are required")
    q0 = model.q0 if q0 is None else float(q0)
    q1 = model.q1 if q1 is None else float(q1)
    iq0, iq1 = inverse(q0), inverse(q1)
    iq = iq0 + iq1
    q = math.inf if iq == 0 else 1.0 / iq
    base = processes[0][0]
    n_paths = base.n_paths
    if any(e.n_paths != n_paths for e, _ in processes):
        raise ConfigurationError("processes must share the same paths")
    starts = [_anchor_start(e, a) for e, a in processes]
    s = max(st[0] for st in starts) if s is None else float(s)
    T = float(base.record_times[-1])
    if not T > s:
        raise ConfigurationError("need a record time after s")
    phi_model = model if phi is None else model.replace(phi=phi)
    phi_int = phi_model.phi_integral(s, T)
    a0, a1 = model.alpha0, model.alpha1
    L = np.full(n_paths, phi_int)
    mask = np.ones(n_paths, dtype=bool)
    for ens, a in processes:
        idx = _times_between(ens.record_times, s, T)
        times = ens.record_times[idx]
        X = ens.states[a][:, idx, :]
        mask &= ens.valid(a)
        integrand = np.zeros(X.shape[:2])
        if iq0:
            integrand = integrand + model.lyapunov_V0.value(X) * iq0 / (4.0 * (T - s) * np.exp(a0 * times))
        if iq1:
            integrand = integrand + model.vbar(times[None, :], X) * iq1 / (4.0 * np.exp(a1 * times))
        L = L + _trapezoid(integrand, times)
    L = L[mask]
    if math.isinf(q):
        log_lhs = float(np.max(L))
        lo = hi = log_lhs
        se = 0.0
    else:
        est, blo, bhi, se = _log_mean_exp_ci(q * L, bootstrap_seed)
        log_lhs, lo, hi, se = est / q, blo / q, bhi / q, se / q
    log_rhs = phi_int
    if iq0:
        # int beta0 (1 - (r-s)/(T-s)) e^{-alpha0 r} / q0 dr
        log_rhs += model.beta0 * iq0 * (_exp_integral(a0, s, T) - _exp_ramp_integral(a0, s, T) / (T - s))
    if iq1:
        log_rhs += model.beta1 * iq1 * _exp_integral(a1, s, T)
    for (ens, a), (s_j, x_j) in zip(processes, starts):
        for i, iq_i, alpha_i in ((0, iq0, a0), (1, iq1, a1)):
            if not iq_i:
                continue
            lyap = model.lyapunov(i)
            if abs(s - s_j) <= 1e-12:
                log_rhs += float(lyap.value(x_j)) * iq_i / (4.0 * math.exp(alpha_i * s))
            else:
                Y = lyap.value(ens.states[a][:, ens.time_index(s), :]) * iq_i / (4.0 * math.exp(alpha_i * s))
                qq = 4.0 / iq_i
                log_rhs += log_mean_exp(qq * Y) / qq
    lhs = math.exp(log_lhs) if log_lhs < LOG_OVERFLOW else math.inf
    rhs = math.exp(log_rhs) if log_rhs < LOG_OVERFLOW else math.inf
    flags = [] if math.isfinite(lhs) else ["overflow: lhs reported in log space"]
    return BoundReport("multiple_exp", lhs, math.exp(min(lo, LOG_OVERFLOW)), math.exp(min(hi, LOG_OVERFLOW)), rhs,
                       _within(hi, log_rhs),
                       {"s": s, "T": T, "q0": q0, "q1": q1, "q": q, "anchors": [a for _, a in processes],
                        "log_rhs": log_rhs, "phi_integral": phi_int},
                       n_effective=int(mask.sum()), method="bootstrap" if math.isfinite(q) else "max",
                       se=se, log_lhs=log_lhs, flags=flags)


# ----------------------------------------------------------------------------
# stochastic Gronwall


def difference_process(ensemble: PathEnsemble, anchor_x: int, anchor_y: int):
    """States of two anchors with a common start time and their difference."""
    if ensemble.anchor_s[anchor_x] != ensemble.anchor_s[anchor_y]:
        raise ConfigurationError("anchors must share a start time")
    X = ensemble.states[anchor_x]
    Y = ensemble.states[anchor_y]
    return X, Y, X - Y


def gronwall_coefficients(model: ModelSpec, X, Y, times, p: float, mode: str = "model"):
    """Coefficients ``(alpha_t, beta_t)`` for the difference ``X - Y``.

    ``mode="model"`` uses the right-hand weight of the certified C^0 condition
    evaluated at the pair of states (so ``beta = 0``); ``mode="pathwise"`` uses
    the smallest admissible ``alpha_t`` computed from the coefficients
    themselves, clipped at zero.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    t = np.asarray(times, dtype=float)[None, :]
    if mode == "model":
        from .model import _lyapunov_weight

        alpha = np.maximum(_lyapunov_weight(model, t, X, Y), 0.0)
    elif mode == "pathwise":
        D = X - Y
        nn = np.sum(D * D, axis=-1)
        a = model.drift(X) - model.drift(Y)
        b = model.diffusion(X) - model.diffusion(Y)
        lhs = (np.sum(D * a, axis=-1) + 0.5 * np.sum(b * b, axis=(-2, -1))
               + 0.5 * (p - 2.0) * np.sum(np.einsum("...i,...ij->...j", D, b) ** 2, axis=-1)
               / np.where(nn > 0, nn, 1.0))
        alpha = np.where(nn > 0, np.maximum(lhs / np.where(nn > 0, nn, 1.0), 0.0), 0.0)
    else:
        raise ValueError("mode must be 'model' or 'pathwise'")
    return np.broadcast_to(alpha, X.shape[:2]).copy(), np.zeros(X.shape[:2])


def gronwall_rhs(Y0, alpha, beta, times, p, q, delta, exp_exponent=None):
    """Right-hand side of the stochastic Gronwall bound at every time in ``times``.

    The exponential factor is an L^q norm by default; pass ``exp_exponent=r``
    for the Hoelder-conjugate L^r reading (a weaker bound).
    """
    q_exp = q if exp_exponent is None else exp_exponent
    Y0 = np.asarray(Y0, dtype=float)
    times = np.asarray(times, dtype=float)
    rel = times - times[0]
    n0 = np.linalg.norm(Y0.reshape(len(Y0), -1), axis=-1) ** p
    dt = np.diff(rel)
    cum = lambda f: np.concatenate([np.zeros((f.shape[0], 1)),
                                    np.cumsum(0.5 * (f[:, 1:] + f[:, :-1]) * dt, axis=1)], axis=1)
    beta_int = cum(np.abs(beta) ** p)
    alpha_int = cum(alpha)
    first = np.mean(n0[:, None] + delta ** ((p - 2.0) / 2.0) * beta_int, axis=0) ** (1.0 / p)
    if math.isinf(q_exp):
        second = np.exp(np.max(alpha_int, axis=0))
    else:
        # mean of exp(q * int alpha) ** (1/q), in log space
        second = np.exp((logsumexp(q_exp * alpha_int, axis=0) - math.log(alpha_int.shape[0])) / q_exp)
    return first * second * np.exp((0.5 - 1.0 / p) * rel / delta)


def check_gronwall(Y, alpha, beta, times, p: float, q: float, r: float, delta: float,
                   bootstrap_seed: int = 0, exp_norm: str = "q") -> BoundReport:
    """Stochastic Gronwall bound for a process ``Y`` of shape ``(n_paths, n_times, d)``.

    Both sides are Monte Carlo estimates; the report is built at the record
    time with the smallest relative slack, where a bootstrap of ``lhs - rhs``
    (paths resampled jointly) gives the one-sided 99% bound used for
    ``satisfied``. The full series is in ``report.series``. ``exp_norm``
    selects the exponent of the norm on ``exp(int alpha)``: ``"q"`` or ``"r"``.
    """
    if exp_norm not in ("q", "r"):
        raise ValueError("exp_norm must be 'q' or 'r'")
    ee = q if exp_norm == "q" else r
    if not delta > 0:
        raise ValueError("delta must be positive")
    if abs(1.0 / q - (1.0 / p + inverse(r))) > 1e-12:
        raise ValueError("need 1/q = 1/p + 1/r")
    Y = np.asarray(Y, dtype=float)
    times = np.asarray(times, dtype=float)
    mags = np.linalg.norm(Y, axis=-1)
    lhs = np.array([empirical_norm(mags[:, k], q) for k in range(len(times))])
    rhs = gronwall_rhs(Y[:, 0], alpha, beta, times, p, q, delta, ee)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_slack = np.where(rhs > 0, (rhs - lhs) / rhs, rhs - lhs)
    first = 1 if len(times) > 1 else 0
    k = first + int(np.argmin(rel_slack[first:]))
    n = Y.shape[0]

    def diff_stat(idx):
        l = empirical_norm(mags[idx, k], q)
        rr = gronwall_rhs(Y[idx, 0], alpha[idx][:, : k + 1], beta[idx][:, : k + 1], times[: k + 1], p, q, delta, ee)[-1]
        return l - rr

    if np.all(mags == mags[:1]) and np.all(alpha == alpha[:1]) and np.all(beta == beta[:1]):
        upper = lhs[k] - rhs[k]
        se = 0.0
        method = "deterministic"
    else:
        boots = _bootstrap(diff_stat, n, bootstrap_seed)
        upper = float(np.quantile(boots, 0.99))
        se = float(np.std(boots, ddof=1))
        method = "bootstrap"
    tol = ROUNDOFF * np.abs(rhs)
    ok = bool(upper <= tol[k] and np.all(lhs <= rhs + tol))
    _, lo, hi, _ = _norm_with_ci(mags[:, k], q)
    return BoundReport("gronwall", float(lhs[k]), lo, hi, float(rhs[k]), ok,
                       {"p": p, "q": q, "r": r, "delta": delta, "t": float(times[k]), "diff_upper": upper,
                        "exp_norm": exp_norm},
                       n_effective=n, method=method, se=se,
                       series={"t": times, "lhs": lhs, "rhs": rhs})


# ----------------------------------------------------------------------------
# flow Hoelder estimate


def holder_bound(model: ModelSpec, s1, t1, x1, s2, t2, x2, p: Optional[float] = None,
                 q: Optional[float] = None) -> float:
    """Explicit right-hand side of the strong local Hoelder estimate for the flow.

    The triples are reordered so that ``s1 <= s2``. With ``r = pq/(p+q)`` and
    ``I = int_0^T phi + beta0 e^{-alpha0 u}/q0 + beta1 e^{-alpha1 u}/q1 du``:

    * time term: ``sqrt|t1-t2| e^{alpha0 gamma T} |r gamma + e^{-alpha0 s1} V0(x1)|^gamma (sqrt T + r)``
    * space term: ``|x1-x2| exp(I + sum_i (V_i(x1) + V_i(x2)) / (2 q_i))``
    * start term: ``sqrt|s1-s2| e^{alpha0 gamma |s2-s1|} |p gamma + V0(x2)|^gamma (sqrt|s2-s1| + p)
      * exp(I + sum_i V_i(x2)/(2 q_i e^{alpha_i s2}) + sum_i V_i(x2)/(2 q_i e^{alpha_i s1}))``

    A bare alpha multiplying gamma is read as alpha0 (the index tied to V0);
    inside the sums it carries the summation index.
    """
    p = model.p_exp if p is None else float(p)
    q = model.q_exp if q is None else float(q)
    r = p if math.isinf(q) else p * q / (p + q)
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if s1 > s2:
        s1, t1, x1, s2, t2, x2 = s2, t2, x2, s1, t1, x1
    T, g = model.horizon, model.gamma
    a0, a1 = model.alpha0, model.alpha1
    iq = (inverse(model.q0), inverse(model.q1))
    V = (model.lyapunov_V0.value, model.lyapunov_V1.value)
    I = model.phi_integral(0.0, T)
    I += model.beta0 * iq[0] * _exp_integral(a0, 0.0, T) + model.beta1 * iq[1] * _exp_integral(a1, 0.0, T)
    alphas = (a0, a1)
    time_term = (math.sqrt(abs(t1 - t2)) * math.exp(a0 * g * T)
                 * abs(r * g + math.exp(-a0 * s1) * float(V[0](x1))) ** g * (math.sqrt(T) + r))
    space_exp = I + sum(iq[i] * (float(V[i](x1)) + float(V[i](x2))) / 2.0 for i in (0, 1))
    space_term = float(np.linalg.norm(x1 - x2)) * math.exp(space_exp) if np.any(x1 != x2) else 0.0
    ds = abs(s2 - s1)
    start_exp = I + sum(iq[i] * float(V[i](x2)) / (2.0 * math.exp(alphas[i] * s2)) for i in (0, 1)) \
        + sum(iq[i] * float(V[i](x2)) / (2.0 * math.exp(alphas[i] * s1)) for i in (0, 1))
    start_term = (math.sqrt(ds) * math.exp(a0 * g * ds) * abs(p * g + float(V[0](x2))) ** g
                  * (math.sqrt(ds) + p) * math.exp(start_exp)) if ds > 0 else 0.0
    return time_term + space_term + start_term


def check_flow_holder(model: ModelSpec, ensemble: PathEnsemble, pair, p: Optional[float] = None,
                      q: Optional[float] = None) -> BoundReport:
    """Hoelder estimate for one pair ``((anchor1, t1), (anchor2, t2))``."""
    (a1, t1), (a2, t2) = pair
    p = model.p_exp if p is None else float(p)
    q = model.q_exp if q is None else float(q)
    r = p if math.isinf(q) else p * q / (p + q)
    s1, x1 = _anchor_start(ensemble, a1)
    s2, x2 = _anchor_start(ensemble, a2)
    mask = ensemble.valid(a1) & ensemble.valid(a2)
    d = ensemble.state(a1, t1)[mask] - ensemble.state(a2, t2)[mask]
    lhs, lo, hi, se = _norm_with_ci(np.linalg.norm(d, axis=-1), r)
    rhs = holder_bound(model, s1, t1, x1, s2, t2, x2, p, q)
    flags = []
    if model.c1 > 1.0:
        flags.append("c1 > 1: the Hoelder estimate assumes unit growth constant")
    return BoundReport("flow_holder", lhs, lo, hi, rhs, _within(hi, rhs),
                       {"s1": s1, "t1": float(t1), "x1": x1, "s2": s2, "t2": float(t2), "x2": x2, "p": p, "q": q,
                        "alpha_unsubscripted": model.alpha_unsubscripted},
                       n_effective=int(mask.sum()), method="clt", se=se, flags=flags)


# ----------------------------------------------------------------------------
# derivative moments


def derivative_bound(model: ModelSpec, s: float, t: float, x, v) -> float:
    """``|v| exp(int_s^t phi + sum_i beta_i / (q_i e^{alpha_i r}) dr + sum_i V_i(x) / (q_i e^{alpha_i s}))``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    expo = model.phi_integral(s, t)
    for i in (0, 1):
        iq = inverse(model.q_index(i))
        if iq:
            a = model.alpha(i)
            expo += model.beta(i) * iq * _exp_integral(a, s, t)
            expo += float(model.lyapunov(i).value(x)) * iq / math.exp(a * s)
    return float(np.linalg.norm(v)) * math.exp(expo)


def check_derivative_moment_bound(model: ModelSpec, deriv: DerivativeEnsemble, v=None) -> BoundReport:
    """``|| D_t ||_{L^{pq/(p+q)}}`` against the derivative moment bound at every record time after s."""
    v = deriv.v if v is None else np.atleast_1d(np.asarray(v, dtype=float))
    r = model.moment_exponent
    s = deriv.anchor_s
    mask = np.ones(deriv.values.shape[0], dtype=bool)
    times = deriv.record_times
    rows = []
    for k, t in enumerate(times):
        lhs, lo, hi, se = _norm_with_ci(np.linalg.norm(deriv.values[mask, k, :], axis=-1), r)
        rhs = derivative_bound(model, s, float(t), deriv.anchor_x, v)
        rows.append((float(t), lhs, lo, hi, se, rhs))
    # report the time closest to violation
    ratios = [row[3] / row[5] if row[5] > 0 else (math.inf if row[3] > 0 else 0.0) for row in rows]
    # equality at t = s is structural, so look after the start when possible
    first = 1 if len(rows) > 1 and rows[0][0] <= s else 0
    k = first + int(np.argmax(ratios[first:]))
    t, lhs, lo, hi, se, rhs = rows[k]
    ok = all(_within(row[3], row[5]) for row in rows)
    return BoundReport("derivative_moment", lhs, lo, hi, rhs, ok,
                       {"anchor_s": s, "anchor_x": deriv.anchor_x, "v": v, "t": t, "mode": deriv.mode,
                        "y": deriv.y, "exponent": r},
                       n_effective=int(mask.sum()), method="clt", se=se,
                       series={"t": [row[0] for row in rows], "lhs": [row[1] for row in rows],
                               "ci_hi": [row[3] for row in rows], "rhs": [row[5] for row in rows]})


# ----------------------------------------------------------------------------
# Kolmogorov-Chentsov table


@dataclass
class KolmogorovTable:
    points: np.ndarray          # (N, 2 + d): s, t, x
    quotients: np.ndarray       # (N, N), nan on the diagonal
    moments: np.ndarray         # (N,)  E|X|^p
    radii: tuple
    quotient_sup: dict
    moment_sup: dict
    argmax: dict
    exponent: float
    alpha_hoelder: object


def _hoelder_distance(points, i, alpha_hoelder, dim):
    d = points - points[i]
    if isinstance(alpha_hoelder, (tuple, list)):
        a_t, a_x = alpha_hoelder
        return (np.abs(d[:, 0]) ** a_t + np.abs(d[:, 1]) ** a_t
                + np.linalg.norm(d[:, 2:], axis=-1) ** a_x)
    return np.linalg.norm(d, axis=-1) ** float(alpha_hoelder)


def kolmogorov_table(ensemble: PathEnsemble, p: float, alpha_hoelder=1.0, anchors=None,
                     radii=(1.0, 2.0, 4.0)) -> KolmogorovTable:
    """Hoelder quotients of the field ``(s, t, x) -> X^x_{s,t}`` on the simulated lattice.

    Lattice points are every (anchor, record time) pair. ``alpha_hoelder`` is
    either one exponent applied to the Euclidean distance in ``(s, t, x)`` or a
    pair ``(time exponent, space exponent)`` giving the anisotropic distance
    ``|ds|^a_t + |dt|^a_t + |dx|^a_x``. For each radius ``n`` the table holds
    the supremum over lattice pairs inside the ball ``|(s, t, x)| <= n``.
    """
    anchors = range(len(ensemble.labels)) if anchors is None else anchors
    pts, fields = [], []
    for a in anchors:
        s = float(ensemble.anchor_s[a])
        for k, t in enumerate(ensemble.record_times):
            if t >= s:
                pts.append(np.concatenate([[s, t], ensemble.anchor_x[a]]))
                fields.append(ensemble.states[a, :, k, :])
    pts = np.array(pts)
    F = np.stack(fields)  # (N, P, d)
    N = len(pts)
    mom = np.mean(np.linalg.norm(F, axis=-1) ** p, axis=1)
    Q = np.full((N, N), np.nan)
    for i in range(N - 1):
        diff = np.linalg.norm(F[i + 1:] - F[i], axis=-1)
        num = np.mean(diff ** p, axis=1) ** (1.0 / p)
        den = _hoelder_distance(pts, i, alpha_hoelder, pts.shape[1] - 2)[i + 1:]
        with np.errstate(divide="ignore", invalid="ignore"):
            qv = np.where(den > 0, num / den, np.where(num > 0, np.inf, 0.0))
        Q[i, i + 1:] = qv
        Q[i + 1:, i] = qv
    norms = np.linalg.norm(pts, axis=-1)
    qsup, msup, arg = {}, {}, {}
    for n in radii:
        inside = norms <= n
        sub = Q[np.ix_(inside, inside)]
        msup[n] = float(np.max(mom[inside])) if inside.any() else 0.0
        if np.all(np.isnan(sub)):
            qsup[n], arg[n] = 0.0, None
            continue
        flat = int(np.nanargmax(sub))
        ii, jj = np.unravel_index(flat, sub.shape)
        idx = np.flatnonzero(inside)
        qsup[n] = float(sub[ii, jj])
        arg[n] = (int(idx[ii]), int(idx[jj]))
    return KolmogorovTable(pts, Q, mom, tuple(radii), qsup, msup, arg, float(p), alpha_hoelder)


# ----------------------------------------------------------------------------
# gradient assembly and quotient convergence


@dataclass
class RateReport:
    sizes: np.ndarray
    errors: np.ndarray
    order: float
    passed: bool
    note: str = ""


def fitted_order(sizes, errors) -> float:
    """Least-squares slope of log(error) against log(size)."""
    sizes = np.asarray(sizes, dtype=float)
    errors = np.asarray(errors, dtype=float)
    return float(np.polyfit(np.log(sizes), np.log(errors), 1)[0])


def gradient_assembly_check(ensemble: PathEnsemble, derivs: Sequence[DerivativeEnsemble], anchor: int = 0,
                            direction: int = 0, min_order: float = 1.8, atol: float = 1e-10) -> RateReport:
    """Residual ``|X^{x+v} - X^x - sum_i v_i D^{e_i}|`` for ``v = y * direction``.

    ``derivs`` holds the variational processes along the standard basis. The
    L^2 residual at the last record time is reported for each simulated ``y``,
    with the fitted order in ``|v|``. Residuals below ``atol`` (linear flows)
    count as a pass regardless of the fitted order.
    """
    d = ensemble.anchor_x.shape[1]
    if len(derivs) != d:
        raise ConfigurationError(f"need {d} basis derivative ensembles, got {len(derivs)}")
    for i, D in enumerate(derivs):
        if D.anchor != anchor or not np.array_equal(D.v, np.eye(d)[i]):
            raise ConfigurationError("derivative ensembles must be the basis directions of the anchor")
    vhat, ys = ensemble.grid.directions[direction]
    base = ensemble.states[anchor][:, -1, :]
    J = np.stack([D.values[:, -1, :] for D in derivs], axis=-1)  # (P, d, d): column i = D^{e_i}
    sizes, errs = [], []
    for l, y in enumerate(ys):
        v = y * vhat
        pert = ensemble.states[ensemble.anchor_index(anchor, direction, l)][:, -1, :]
        res = pert - base - np.einsum("pij,j->pi", J, v)
        sizes.append(float(np.linalg.norm(v)))
        errs.append(float(np.sqrt(np.mean(np.sum(res * res, axis=-1)))))
    sizes, errs = np.array(sizes), np.array(errs)
    if np.all(errs <= atol):
        return RateReport(sizes, errs, math.inf, True, "residual at round-off level")
    order = fitted_order(sizes, np.maximum(errs, 1e-300))
    return RateReport(sizes, errs, order, bool(order >= min_order))


def quotient_convergence(ensemble: PathEnsemble, variational: DerivativeEnsemble, anchor: int = 0,
                         direction: int = 0, min_order: float = 0.9, atol: float = 1e-10) -> RateReport:
    """L^2 distance between difference quotients and the variational process, per y."""
    from .sim import difference_quotient

    vhat, ys = ensemble.grid.directions[direction]
    sizes, errs = [], []
    for y in ys:
        dq = difference_quotient(ensemble, anchor, direction, y)
        diff = dq.values - variational.values
        sizes.append(abs(y))
        errs.append(float(np.sqrt(np.mean(np.sum(diff * diff, axis=-1)))))
    sizes, errs = np.array(sizes), np.array(errs)
    if np.all(errs <= atol):
        return RateReport(sizes, errs, math.inf, True, "residual at round-off level")
    order = fitted_order(sizes, np.maximum(errs, 1e-300))
    return RateReport(sizes, errs, order, bool(order >= min_order))
