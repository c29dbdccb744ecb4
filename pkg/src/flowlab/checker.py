"""Sampling-based certification of the coefficient hypotheses.

A certificate here is a statement about the sampled tuples only: it reports
the smallest margin seen for each condition family and the tuple where it
was attained. Nothing is claimed for points that were not evaluated.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from . import model as M
from .model import DomainError, ModelSpec

SAMPLERS = ("sobol", "uniform-random", "grid")
LAMBDA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
CONDITION_IDS = (
    "monotonicity_C1",
    "monotonicity_C0",
    "exp_moment_V0",
    "exp_moment_V1",
    "coeff_growth",
    "jacobian_growth",
    "jacobian_lipschitz",
)


class RegionError(DomainError):
    """The sampling region is not (mostly) inside the model domain."""


@dataclass(frozen=True)
class SampleRegion:
    box_lo: tuple
    box_hi: tuple
    n_points: int = 256
    n_directions: int = 8
    n_times: int = 4
    sampler: str = "sobol"

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.box_lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.box_hi))
        if len(lo) != len(hi) or not lo:
            raise ValueError("box_lo and box_hi must have the same positive length")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError("box_lo must be strictly below box_hi")
        if self.n_points < 1 or self.n_directions < 1 or self.n_times < 1:
            raise ValueError("n_points, n_directions and n_times must be >= 1")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        object.__setattr__(self, "box_lo", lo)
        object.__setattr__(self, "box_hi", hi)

    @property
    def dim(self) -> int:
        return len(self.box_lo)

    def as_dict(self) -> dict:
        return {"box_lo": list(self.box_lo), "box_hi": list(self.box_hi), "n_points": self.n_points,
                "n_directions": self.n_directions, "n_times": self.n_times, "sampler": self.sampler}


@dataclass
class ConditionRecord:
    condition_id: str
    n_evaluated: int
    min_margin: float
    argmin_witness: dict
    passed: bool

    def as_dict(self) -> dict:
        return {
            "condition_id": self.condition_id,
            "n_evaluated": self.n_evaluated,
            "min_margin": format_float(self.min_margin),
            "argmin_witness": {k: _listify(v) for k, v in self.argmin_witness.items()},
            "passed": self.passed,
        }


@dataclass
class ConditionReport:
    records: list
    metadata: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def record(self, condition_id: str) -> ConditionRecord:
        for r in self.records:
            if r.condition_id == condition_id:
                return r
        raise KeyError(condition_id)

    def as_dict(self) -> dict:
        return {"passed": self.passed, "conditions": [r.as_dict() for r in self.records],
                "metadata": self.metadata}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def format_float(x: float) -> str:
    """17-significant-digit decimal string (round-trips every double)."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.17g}"


def _listify(v):
    if isinstance(v, np.ndarray):
        return [float(a) for a in v.ravel()]
    if isinstance(v, (np.floating, float)):
        return float(v)
    return v


# ----------------------------------------------------------------------------
# sampling


class _Sampler:
    """Draws k-tuples of points in the box, rejecting tuples that leave the domain."""

    def __init__(self, model: ModelSpec, region: SampleRegion, seed: int):
        self.model = model
        self.region = region
        self.seed = int(seed)
        self.lo = np.array(region.box_lo)
        self.hi = np.array(region.box_hi)
        self.rejected = 0
        self.drawn = 0

    def _unit(self, n, k, stream):
        d = self.region.dim
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, stream])
        if self.region.sampler == "sobol":
            eng = qmc.Sobol(d=k * d, scramble=True, seed=np.random.default_rng(ss))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                return eng.random(n)
        gen = np.random.default_rng(ss)
        if self.region.sampler == "uniform-random":
            return gen.random((n, k * d))
        # grid: tensor grid in one copy of the box; tuples combine shuffled grid points
        g = self.grid_size()
        axes = [np.linspace(0.0, 1.0, g)] * d
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        cols = [pts] + [pts[gen.permutation(len(pts))] for _ in range(k - 1)]
        tup = np.concatenate(cols, axis=1)
        reps = int(math.ceil(n / len(tup)))
        return np.concatenate([tup] * reps, axis=0)[:n]

    def grid_size(self) -> int:
        return max(2, int(math.ceil(self.region.n_points ** (1.0 / self.region.dim) - 1e-9)))

    def draw(self, k: int, stream: int) -> np.ndarray:
        """Array ``(n_points, k, d)`` of accepted tuples."""
        n = self.region.n_points
        d = self.region.dim
        if self.region.sampler == "grid" and k == 1:
            n = self.grid_size() ** d
        want = n
        tries = 0
        accepted = []
        total = 0
        while sum(len(a) for a in accepted) < want:
            batch = max(want, 16) * (2 ** tries)
            u = self._unit(batch, k, stream * 64 + tries)
            pts = self.lo + (self.hi - self.lo) * u.reshape(batch, k, d)
            inside = np.all(np.asarray(self.model.domain_cal_O(pts), dtype=bool), axis=-1)
            total += batch
            self.rejected += int(np.sum(~inside))
            accepted.append(pts[inside])
            if np.sum(~inside) > 0.5 * batch:
                raise RegionError(f"more than 50% of samples fall outside the domain "
                                  f"({int(np.sum(~inside))}/{batch})")
            tries += 1
            if tries > 8:
                raise RegionError("could not draw enough in-domain samples")
        self.drawn += total
        return np.concatenate(accepted, axis=0)[:want]

    def directions(self) -> np.ndarray:
        gen = np.random.default_rng(np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, 999]))
        h = gen.standard_normal((self.region.n_directions, self.region.dim))
        norms = np.linalg.norm(h, axis=-1, keepdims=True)
        h = np.where(norms > 0, h / np.where(norms > 0, norms, 1.0), 1.0 / math.sqrt(self.region.dim))
        return h

    def times(self) -> np.ndarray:
        T = self.model.horizon
        return T * np.arange(self.region.n_times) / self.region.n_times


def _check_corners(model: ModelSpec, region: SampleRegion):
    d = region.dim
    if d != model.dim_state:
        raise RegionError(f"region dimension {d} != model dimension {model.dim_state}")
    k = min(d, 10)
    lo, hi = np.array(region.box_lo), np.array(region.box_hi)
    for bits in range(2 ** k):
        c = lo.copy()
        for j in range(k):
            if bits >> j & 1:
                c[j] = hi[j]
        if not bool(np.asarray(model.domain_cal_O(c))):
            raise RegionError(f"box corner {c.tolist()} lies outside the domain")


@dataclass
class _Samples:
    points: np.ndarray      # (n, d)
    pairs: np.ndarray       # (n, 2, d)
    quads: np.ndarray       # (n, 4, d)
    directions: np.ndarray  # (k, d)
    times: np.ndarray       # (nt,)
    rejected: int
    drawn: int


def _draw_samples(model, region, seed) -> _Samples:
    _check_corners(model, region)
    s = _Sampler(model, region, seed)
    points = s.draw(1, 1)[:, 0, :]
    pairs = s.draw(2, 2)
    # diagonal pairs exercise the pointwise Jacobian in the C1 condition
    n_diag = max(1, len(points) // 4)
    diag = np.stack([points[:n_diag], points[:n_diag]], axis=1)
    pairs = np.concatenate([pairs, diag], axis=0)
    quads = s.draw(4, 3)
    return _Samples(points, pairs, quads, s.directions(), s.times(), s.rejected, s.drawn)


# ----------------------------------------------------------------------------
# margin tables


def _margin_tables(model: ModelSpec, S: _Samples, nodes: int) -> dict:
    """Margins for every condition family, with a function mapping argmin -> witness."""
    out = {}
    x, y = S.pairs[:, 0, :], S.pairs[:, 1, :]
    t = S.times
    h = S.directions

    c1 = M.monotonicity_margin_C1(model, t[None, None, :], x[:, None, None, :], y[:, None, None, :],
                                  h[None, :, None, :], nodes=nodes)
    c1 = np.broadcast_to(c1, (len(x), len(h), len(t)))
    out["monotonicity_C1"] = (c1, lambda i: dict(zip(("t", "x", "y", "h"), (
        t[i[2]], x[i[0]], y[i[0]], h[i[1]]))))

    offdiag = np.any(x != y, axis=-1)
    xo, yo = x[offdiag], y[offdiag]
    c0 = M.monotonicity_margin_C0(model, t[None, :], xo[:, None, :], yo[:, None, :])
    c0 = np.broadcast_to(c0, (len(xo), len(t)))
    out["monotonicity_C0"] = (c0, lambda i: {"t": t[i[1]], "x": xo[i[0]], "y": yo[i[0]]})

    pts = S.points
    for idx in (0, 1):
        e = M.exp_moment_margin(model, idx, t[None, :], pts[:, None, :])
        e = np.broadcast_to(e, (len(pts), len(t)))
        out[f"exp_moment_V{idx}"] = (e, lambda i: {"t": t[i[1]], "x": pts[i[0]]})

    out["coeff_growth"] = (M.coeff_growth_margin(model, pts), lambda i: {"x": pts[i[0]]})
    out["jacobian_growth"] = (M.jacobian_growth_margin(model, x, y, nodes),
                              lambda i: {"x": x[i[0]], "y": y[i[0]]})

    q = S.quads
    lam = np.array(LAMBDA_GRID)
    lip = M.jacobian_lipschitz_margin(model, lam[None, :], *(q[:, None, j, :] for j in range(4)))
    out["jacobian_lipschitz"] = (lip, lambda i: {"lambda": lam[i[1]], "x1": q[i[0], 0], "x2": q[i[0], 1],
                                                 "x3": q[i[0], 2], "x4": q[i[0], 3]})
    return out


def reevaluate_witness(model: ModelSpec, condition_id: str, witness: dict, nodes: int = M.DEFAULT_NODES) -> float:
    """Recompute a record's margin at its witness through the single-point API."""
    w = {k: (np.asarray(v, dtype=float) if isinstance(v, (list, np.ndarray)) else v) for k, v in witness.items()}
    if condition_id == "monotonicity_C1":
        val = M.monotonicity_margin_C1(model, w["t"], w["x"], w["y"], w["h"], nodes=nodes)
    elif condition_id == "monotonicity_C0":
        val = M.monotonicity_margin_C0(model, w["t"], w["x"], w["y"])
    elif condition_id in ("exp_moment_V0", "exp_moment_V1"):
        val = M.exp_moment_margin(model, int(condition_id[-1]), w["t"], w["x"])
    elif condition_id == "coeff_growth":
        val = M.coeff_growth_margin(model, w["x"])
    elif condition_id == "jacobian_growth":
        val = M.jacobian_growth_margin(model, w["x"], w["y"], nodes)
    elif condition_id == "jacobian_lipschitz":
        val = M.jacobian_lipschitz_margin(model, w["lambda"], w["x1"], w["x2"], w["x3"], w["x4"])
    else:
        raise KeyError(condition_id)
    return float(val)


def certify(model: ModelSpec, region: SampleRegion, seed: int, tol_cert: float = 0.0,
            nodes: int = M.DEFAULT_NODES) -> ConditionReport:
    """Evaluate every hypothesis family on sampled tuples and report minima."""
    S = _draw_samples(model, region, seed)
    tables = _margin_tables(model, S, nodes)
    records = []
    for cid in CONDITION_IDS:
        vals, witness_of = tables[cid]
        vals = np.asarray(vals, dtype=float)
        if vals.size == 0:
            records.append(ConditionRecord(cid, 0, math.inf, {}, True))
            continue
        # NaN margins count as failures
        clean = np.where(np.isnan(vals), -np.inf, vals)
        flat = int(np.argmin(clean))
        idx = np.unravel_index(flat, vals.shape)
        mn = float(clean[idx])
        records.append(ConditionRecord(cid, int(vals.size), mn, witness_of(idx), bool(mn >= -tol_cert)))
    meta = {
        "seed": int(seed),
        "sampler": region.sampler,
        "region": region.as_dict(),
        "model_name": model.name,
        "flags": {"horizon_weighting": model.horizon_weighting,
                  "alpha_unsubscripted": model.alpha_unsubscripted,
                  "warnings": model.flags},
        "constants": model.constants(),
        "tol_cert": tol_cert,
        "quadrature_nodes": nodes,
        "rejected_samples": S.rejected,
        "note": "certification covers the sampled tuples only",
    }
    return ConditionReport(records, meta)


# ----------------------------------------------------------------------------
# constant fitting


@dataclass
class FittedConstants:
    c1_min: float
    c2_min: float
    c3_min: float
    alpha0_min: float
    beta0_min: float
    alpha1_min: float
    beta1_min: float
    phi_min: float

    @property
    def passed(self) -> bool:
        return all(math.isfinite(v) for v in self.as_dict().values())

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in
                ("c1_min", "c2_min", "c3_min", "alpha0_min", "beta0_min", "alpha1_min", "beta1_min", "phi_min")}

    def apply(self, model: ModelSpec, slack: float = 1e-9) -> ModelSpec:
        """Model with the fitted c1, c2, c3, alpha_i and phi.

        The beta_i stay as in ``model`` (the alpha fits were made with them).
        ``slack`` inflates each constant by ``slack * max(1, |value|)`` so that
        rounding in the margin arithmetic cannot turn an exact zero negative.
        """
        def up(v):
            return v + slack * max(1.0, abs(v))

        return model.replace(c1=up(self.c1_min), c2=up(self.c2_min), c3=up(self.c3_min),
                             alpha0=self.alpha0_min, alpha1=self.alpha1_min, phi=up(self.phi_min))


def _ratio_max(num, den) -> float:
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(num <= 0, 0.0, np.where(den > 0, num / den, np.inf))
    return float(np.max(r)) if r.size else 0.0


def _fit_alpha(model: ModelSpec, i: int, pts, times) -> float:
    key = f"alpha{i}"

    def ok(a):
        m = model.replace(**{key: a})
        return float(np.min(M.exp_moment_margin(m, i, times[None, :], pts[:, None, :]))) >= 0.0

    if ok(0.0):
        return 0.0
    hi = 1.0
    while not ok(hi):
        hi *= 2.0
        if hi > 1e12:
            return math.inf
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def fit_constants(model: ModelSpec, region: SampleRegion, seed: int,
                  nodes: int = M.DEFAULT_NODES) -> FittedConstants:
    """Smallest constants making every sampled margin nonnegative.

    gamma, delta, p, q, q0, q1 and beta_i are kept; the alpha_i are fitted
    first (by bisection, the margin is nondecreasing in alpha) and phi is then
    fitted as a constant with those alphas in place.
    """
    S = _draw_samples(model, region, seed)
    x, y = S.pairs[:, 0, :], S.pairs[:, 1, :]
    pts, t, h = S.points, S.times, S.directions
    v0 = model.lyapunov_V0.value

    mu = model.drift(pts)
    sig = model.diffusion(pts)
    size = np.maximum(np.linalg.norm(mu, axis=-1), np.sqrt(np.sum(sig * sig, axis=(-2, -1))))
    c1 = _ratio_max(size, (1.0 + v0(pts)) ** model.gamma)

    a = M.averaged_jacobian(model, x, y, "drift", nodes)
    s = M.averaged_jacobian(model, x, y, "diffusion", nodes)
    jsize = np.maximum(M.op_norm(a), M.diffusion_op_norm(s))
    c2 = _ratio_max(jsize, (2.0 + v0(x) + v0(y)) ** model.gamma)

    q = S.quads
    lam = np.array(LAMBDA_GRID)[None, :, None]
    qa = lam * q[:, None, 0] + (1 - lam) * q[:, None, 1]
    qb = lam * q[:, None, 2] + (1 - lam) * q[:, None, 3]
    diff = M.op_norm(model.drift_jacobian(qa) - model.drift_jacobian(qb))
    comb = np.linalg.norm(lam * (q[:, None, 0] - q[:, None, 2]) + (1 - lam) * (q[:, None, 1] - q[:, None, 3]),
                          axis=-1)
    weight = (4.0 + sum(v0(q[:, None, j]) for j in range(4))) ** model.gamma
    c3 = _ratio_max(diff, comb * weight)

    alpha0 = _fit_alpha(model, 0, pts, t)
    alpha1 = _fit_alpha(model, 1, pts, t)
    beta = []
    for i in (0, 1):
        marg = M.exp_moment_margin(model, i, t[None, :], pts[:, None, :])
        beta.append(float(model.beta(i) - np.min(marg)))

    if math.isfinite(alpha0) and math.isfinite(alpha1):
        base = model.replace(alpha0=alpha0, alpha1=alpha1, phi=0.0)
        m1 = M.monotonicity_margin_C1(base, t[None, None, :], x[:, None, None, :], y[:, None, None, :],
                                      h[None, :, None, :], nodes=nodes)
        hh = np.sum(h * h, axis=-1)[None, :, None]
        need = -np.min(m1 / hh)
        offdiag = np.any(x != y, axis=-1)
        if offdiag.any():
            xo, yo = x[offdiag], y[offdiag]
            m0 = M.monotonicity_margin_C0(base, t[None, :], xo[:, None, :], yo[:, None, :])
            nn = np.sum((xo - yo) ** 2, axis=-1)[:, None]
            need = max(need, -np.min(m0 / nn))
        phi = max(0.0, float(need))
    else:
        phi = math.inf
    return FittedConstants(c1, c2, c3, alpha0, beta[0], alpha1, beta[1], phi)
