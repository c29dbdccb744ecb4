"""Coupled Monte Carlo simulation of stochastic flows and their derivatives.

All anchors of a :class:`FlowGrid` are driven by one Brownian path per path
index: the increment over ``[k dt, (k+1) dt]`` for path ``w`` depends only on
``(seed, w, k)``. Two flows started at different points or times therefore
see identical noise on overlapping intervals, which is what makes the
difference quotient ``(X^{x+yv} - X^x) / y`` meaningful pathwise.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rng
from .model import FlowlabError, ModelSpec, apply_direction

SCHEMES = ("euler_maruyama", "tamed_euler")
EXIT_POLICIES = ("freeze", "reject")
BINARY_MAGIC = b"FLOWLAB1"


class SimulationError(FlowlabError):
    """A state became non-finite during integration."""

    def __init__(self, message, anchor=None, path=None, step=None):
        super().__init__(message)
        self.anchor = anchor
        self.path = path
        self.step = step


class ConfigurationError(FlowlabError, ValueError):
    """The grid or ensemble does not contain what an operation needs."""


def _on_grid(value: float, dt: float) -> int:
    k = round(value / dt)
    if abs(k * dt - value) > 1e-9 * max(1.0, abs(value)):
        raise ConfigurationError(f"time {value!r} is not a multiple of the step {dt!r}")
    return int(k)


@dataclass(frozen=True)
class FlowGrid:
    """Anchors, perturbation directions and time discretisation.

    Each ``(v, y_values)`` entry of ``directions`` adds the perturbed starting
    points ``x + y v`` for every anchor ``(s, x)``.
    """

    anchors: Sequence
    time_step: float
    n_paths: int
    record_times: Sequence[float]
    directions: Sequence = ()
    scheme: str = "euler_maruyama"
    exit_policy: str = "freeze"

    def __post_init__(self):
        anchors = tuple((float(s), np.atleast_1d(np.asarray(x, dtype=float))) for s, x in self.anchors)
        if not anchors:
            raise ConfigurationError("at least one anchor is required")
        dims = {x.shape for _, x in anchors}
        if len(dims) != 1:
            raise ConfigurationError("anchors have inconsistent dimensions")
        dirs = []
        for v, ys in self.directions:
            v = np.atleast_1d(np.asarray(v, dtype=float))
            ys = tuple(float(y) for y in ys)
            if any(y == 0 for y in ys):
                raise ConfigurationError("perturbation sizes must be nonzero")
            dirs.append((v, ys))
        rec = tuple(float(t) for t in self.record_times)
        if not rec or list(rec) != sorted(set(rec)):
            raise ConfigurationError("record_times must be a nonempty strictly increasing list")
        if not self.time_step > 0:
            raise ConfigurationError("time_step must be positive")
        if self.n_paths < 1:
            raise ConfigurationError("n_paths must be positive")
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}")
        if self.exit_policy not in EXIT_POLICIES:
            raise ConfigurationError(f"exit_policy must be one of {EXIT_POLICIES}")
        s_max = max(s for s, _ in anchors)
        if rec[0] < s_max:
            raise ConfigurationError("every record time must be >= every anchor start time")
        for s, _ in anchors:
            _on_grid(s, self.time_step)
        for t in rec:
            _on_grid(t, self.time_step)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "directions", tuple(dirs))
        object.__setattr__(self, "record_times", rec)

    @property
    def dim(self) -> int:
        return self.anchors[0][1].shape[0]

    @property
    def n_base(self) -> int:
        return len(self.anchors)

    def expanded(self):
        """All simulated starts as ``(s, x, label)``.

        ``label`` is ``(anchor, None, None)`` for base anchors and
        ``(anchor, direction, y_index)`` for perturbed ones.
        """
        out = [(s, x, (a, None, None)) for a, (s, x) in enumerate(self.anchors)]
        for a, (s, x) in enumerate(self.anchors):
            for j, (v, ys) in enumerate(self.directions):
                for l, y in enumerate(ys):
                    out.append((s, x + y * v, (a, j, l)))
        return out

    def validate_for(self, model: ModelSpec):
        if self.dim != model.dim_state:
            raise ConfigurationError(f"anchor dimension {self.dim} != model dimension {model.dim_state}")
        if self.record_times[-1] > model.horizon * (1 + 1e-12):
            raise ConfigurationError("record times exceed the model horizon")
        for s, x, label in self.expanded():
            if not bool(np.asarray(model.domain_cal_O(x))):
                raise ConfigurationError(f"start point {x.tolist()} ({label}) lies outside the domain")


@dataclass
class PathEnsemble:
    """Recorded states of all anchors on shared Brownian paths.

    ``states`` has shape ``(n_anchors, n_paths, n_record, d)``; anchor order
    follows :meth:`FlowGrid.expanded`.
    """

    model: Optional[ModelSpec]
    grid: Optional[FlowGrid]
    seed: int
    anchor_s: np.ndarray
    anchor_x: np.ndarray
    labels: list
    record_times: np.ndarray
    states: np.ndarray
    exited: np.ndarray
    exit_time: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.states.shape[1]

    @property
    def exit_fraction(self) -> float:
        return float(np.mean(self.exited))

    def time_index(self, t: float) -> int:
        idx = np.flatnonzero(np.isclose(self.record_times, t, rtol=0, atol=1e-12 * max(1.0, abs(t))))
        if idx.size == 0:
            raise ConfigurationError(f"time {t!r} is not a record time")
        return int(idx[0])

    def state(self, anchor: int, t: Optional[float] = None) -> np.ndarray:
        """``(n_paths, d)`` states of one anchor at a record time (default: last)."""
        k = -1 if t is None else self.time_index(t)
        return self.states[anchor, :, k, :]

    def valid(self, anchor: int) -> np.ndarray:
        """Path mask honouring the exit policy (all paths under ``freeze``)."""
        if self.grid is not None and self.grid.exit_policy == "reject":
            return ~self.exited[anchor]
        return np.ones(self.n_paths, dtype=bool)

    def anchor_index(self, anchor: int, direction=None, y_index=None) -> int:
        try:
            return self.labels.index((anchor, direction, y_index))
        except ValueError:
            raise ConfigurationError(f"no simulated start for anchor={anchor}, direction={direction}, "
                                     f"y_index={y_index}") from None

    # -- export ------------------------------------------------------------

    def to_csv(self, path) -> None:
        """Columnar CSV: one row per (path, anchor, record time)."""
        import csv

        d = self.states.shape[-1]
        header = ["path", "anchor", "anchor_s"] + [f"anchor_x{i}" for i in range(d)] + ["t"] + \
                 [f"state{i}" for i in range(d)] + ["exited"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(header)
            for a in range(self.states.shape[0]):
                ax = [repr(float(v)) for v in self.anchor_x[a]]
                for p in range(self.n_paths):
                    for k, t in enumerate(self.record_times):
                        w.writerow([p, a, repr(float(self.anchor_s[a]))] + ax + [repr(float(t))]
                                   + [repr(float(v)) for v in self.states[a, p, k]]
                                   + [int(self.exited[a, p])])

    def to_binary(self, path) -> None:
        """Little-endian dump: magic, dims, anchors, times, states, exit data."""
        A, P, R, d = self.states.shape
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC)
            fh.write(struct.pack("<QQQQq", A, P, R, d, int(self.seed)))
            fh.write(np.ascontiguousarray(self.anchor_s, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.anchor_x, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.record_times, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.states, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.exited, dtype="u1").tobytes())
            fh.write(np.ascontiguousarray(self.exit_time, dtype="<f8").tobytes())

    @classmethod
    def from_binary(cls, path) -> "PathEnsemble":
        with open(path, "rb") as fh:
            buf = fh.read()
        if buf[:8] != BINARY_MAGIC:
            raise ConfigurationError("not a FLOWLAB1 file")
        A, P, R, d, seed = struct.unpack_from("<QQQQq", buf, 8)
        off = 8 + struct.calcsize("<QQQQq")

        def take(count, dtype, shape):
            nonlocal off
            arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape)
            off += arr.nbytes
            return arr.astype(np.float64 if dtype == "<f8" else bool)

        anchor_s = take(A, "<f8", (A,))
        anchor_x = take(A * d, "<f8", (A, d))
        times = take(R, "<f8", (R,))
        states = take(A * P * R * d, "<f8", (A, P, R, d))
        exited = take(A * P, "u1", (A, P))
        exit_time = take(A * P, "<f8", (A, P))
        return cls(model=None, grid=None, seed=seed, anchor_s=anchor_s, anchor_x=anchor_x,
                   labels=[(a, None, None) for a in range(A)], record_times=times, states=states,
                   exited=exited, exit_time=exit_time)


@dataclass
class DerivativeEnsemble:
    """Derivative-process values ``(n_paths, n_record, d)`` for one anchor and direction."""

    anchor: int
    v: np.ndarray
    y: Optional[float]
    mode: str
    anchor_s: float
    anchor_x: np.ndarray
    record_times: np.ndarray
    values: np.ndarray
    exited: np.ndarray = field(default=None)

    def at(self, t: Optional[float] = None) -> np.ndarray:
        if t is None:
            return self.values[:, -1, :]
        idx = np.flatnonzero(np.isclose(self.record_times, t, rtol=0, atol=1e-12 * max(1.0, abs(t))))
        if idx.size == 0:
            raise ConfigurationError(f"time {t!r} is not a record time")
        return self.values[:, int(idx[0]), :]


# ----------------------------------------------------------------------------
# stepping


def drift_increment(model: ModelSpec, X: np.ndarray, dt: float, scheme: str) -> np.ndarray:
    mu = model.drift(X)
    if scheme == "tamed_euler":
        norm = np.linalg.norm(mu, axis=-1, keepdims=True)
        return dt * mu / (1.0 + dt * norm)
    return dt * mu


def drift_increment_jacobian(model: ModelSpec, X: np.ndarray, dt: float, scheme: str) -> np.ndarray:
    """Jacobian of :func:`drift_increment` with respect to the state."""
    jac = model.drift_jacobian(X)
    if scheme != "tamed_euler":
        return dt * jac
    mu = model.drift(X)
    norm = np.linalg.norm(mu, axis=-1)
    scale = 1.0 + dt * norm
    # d|mu| = mu^T mu' / |mu|; the correction vanishes continuously at mu = 0
    safe = np.where(norm > 0, norm, 1.0)
    grad_norm = np.einsum("...i,...ij->...j", mu, jac) / safe[..., None]
    grad_norm = np.where((norm > 0)[..., None], grad_norm, 0.0)
    corr = dt * np.einsum("...i,...j->...ij", mu, grad_norm) / (scale ** 2)[..., None, None]
    return dt * (jac / scale[..., None, None] - corr)


def _step(model, X, dW, dt, scheme):
    noise = np.einsum("...ij,...j->...i", model.diffusion(X), dW)
    return X + drift_increment(model, X, dt, scheme) + noise


def brownian_increments(seed: int, paths, step: int, m: int, dt: float) -> np.ndarray:
    """Increments ``(len(paths), m)`` over ``[step dt, (step+1) dt]``."""
    return rng.normal_increments(rng.path_keys(seed, paths), step, m, dt)


def _chunks(n: int, n_threads: int):
    n_threads = max(1, min(int(n_threads), n))
    bounds = np.linspace(0, n, n_threads + 1).astype(int)
    return [np.arange(bounds[i], bounds[i + 1]) for i in range(n_threads)]


def _run_chunks(fn, n_paths, n_threads):
    chunks = _chunks(n_paths, n_threads)
    if len(chunks) == 1:
        return [fn(chunks[0])]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        return list(pool.map(fn, chunks))


def _simulate_chunk(model, grid, seed, starts, paths):
    dt = grid.time_step
    m = model.dim_noise
    A, P, d = len(starts), len(paths), model.dim_state
    start_step = np.array([_on_grid(s, dt) for s, _, _ in starts])
    rec_steps = [_on_grid(t, dt) for t in grid.record_times]
    x0 = np.stack([x for _, x, _ in starts])
    keys = rng.path_keys(seed, paths)
    X = np.broadcast_to(x0[:, None, :], (A, P, d)).copy()
    exited = np.zeros((A, P), dtype=bool)
    exit_time = np.full((A, P), np.nan)
    out = np.empty((A, P, len(rec_steps), d))
    k0 = int(start_step.min())
    rec_pos = 0
    for k in range(k0, rec_steps[-1] + 1):
        while rec_pos < len(rec_steps) and rec_steps[rec_pos] == k:
            out[:, :, rec_pos, :] = X
            rec_pos += 1
        if k == rec_steps[-1]:
            break
        dW = rng.normal_increments(keys, k, m, dt)
        active = start_step <= k
        if active.all():
            cur = X
        else:
            cur = X[active]
        new = _step(model, cur, dW, dt, grid.scheme)
        bad = ~np.all(np.isfinite(new), axis=-1)
        if bad.any():
            a_idx, p_idx = np.argwhere(bad)[0]
            anchor = int(np.flatnonzero(active)[a_idx])
            raise SimulationError(
                f"non-finite state at anchor {anchor}, path {int(paths[p_idx])}, step {k}",
                anchor=anchor, path=int(paths[p_idx]), step=k)
        inside = np.asarray(model.domain_cal_O(new), dtype=bool)
        prev_exit = exited[active] if not active.all() else exited
        keep = inside & ~prev_exit
        new = np.where(keep[..., None], new, cur)
        newly = ~inside & ~prev_exit
        if active.all():
            X = new
            exit_time[newly] = (k + 1) * dt
            exited |= newly
        else:
            X[active] = new
            sub_t = exit_time[active]
            sub_t[newly] = (k + 1) * dt
            exit_time[active] = sub_t
            exited[active] = prev_exit | newly
    return out, exited, exit_time


def simulate_flow(model: ModelSpec, grid: FlowGrid, seed: int, n_threads: int = 1) -> PathEnsemble:
    """Integrate the flow from every (base and perturbed) start on shared noise.

    Results do not depend on ``n_threads``: paths are split into contiguous
    chunks and every path's noise is regenerated from its own key.
    """
    grid.validate_for(model)
    starts = grid.expanded()
    parts = _run_chunks(lambda paths: _simulate_chunk(model, grid, seed, starts, paths),
                        grid.n_paths, n_threads)
    states = np.concatenate([p[0] for p in parts], axis=1)
    exited = np.concatenate([p[1] for p in parts], axis=1)
    exit_time = np.concatenate([p[2] for p in parts], axis=1)
    return PathEnsemble(
        model=model, grid=grid, seed=int(seed),
        anchor_s=np.array([s for s, _, _ in starts]),
        anchor_x=np.stack([x for _, x, _ in starts]),
        labels=[lab for _, _, lab in starts],
        record_times=np.array(grid.record_times),
        states=states, exited=exited, exit_time=exit_time,
    )


def propagate(model: ModelSpec, x0, s: float, t: float, time_step: float, seed: int,
              scheme: str = "euler_maruyama", paths=None) -> np.ndarray:
    """Advance per-path initial states ``x0`` (shape ``(P, d)``) from ``s`` to ``t``.

    Uses the same keyed increments as :func:`simulate_flow`, so restarting a
    recorded state at an intermediate grid time continues the same path.
    """
    x0 = np.asarray(x0, dtype=float)
    paths = np.arange(x0.shape[0]) if paths is None else np.asarray(paths)
    keys = rng.path_keys(seed, paths)
    X = x0.copy()
    for k in range(_on_grid(s, time_step), _on_grid(t, time_step)):
        dW = rng.normal_increments(keys, k, model.dim_noise, time_step)
        X = _step(model, X, dW, time_step, scheme)
    return X


def _variational_chunk(model, ens, anchor, v, paths):
    grid = ens.grid
    dt = grid.time_step
    m = model.dim_noise
    keys = rng.path_keys(ens.seed, paths)
    P = len(paths)
    X = np.broadcast_to(ens.anchor_x[anchor], (P, model.dim_state)).copy()
    D = np.broadcast_to(v, (P, model.dim_state)).copy()
    alive = np.ones(P, dtype=bool)
    k0 = _on_grid(float(ens.anchor_s[anchor]), dt)
    rec_steps = [_on_grid(t, dt) for t in grid.record_times]
    out = np.empty((P, len(rec_steps), model.dim_state))
    rec_pos = 0
    for k in range(k0, rec_steps[-1] + 1):
        while rec_pos < len(rec_steps) and rec_steps[rec_pos] == k:
            out[:, rec_pos, :] = D
            rec_pos += 1
        if k == rec_steps[-1]:
            break
        dW = rng.normal_increments(keys, k, m, dt)
        jd = drift_increment_jacobian(model, X, dt, grid.scheme)
        sd = apply_direction(model.diffusion_jacobian(X), D)
        D_new = D + np.einsum("pij,pj->pi", jd, D) + np.einsum("pij,pj->pi", sd, dW)
        X_new = _step(model, X, dW, dt, grid.scheme)
        if not np.all(np.isfinite(D_new)):
            p = int(np.argwhere(~np.all(np.isfinite(D_new), axis=-1))[0, 0])
            raise SimulationError(f"non-finite derivative at anchor {anchor}, path {int(paths[p])}, step {k}",
                                  anchor=anchor, path=int(paths[p]), step=k)
        inside = np.asarray(model.domain_cal_O(X_new), dtype=bool) & alive
        X = np.where(inside[:, None], X_new, X)
        D = np.where(inside[:, None], D_new, D)
        alive = inside
    return out


def simulate_variational(model: ModelSpec, ensemble: PathEnsemble, anchor: int, v,
                         n_threads: int = 1) -> DerivativeEnsemble:
    """Derivative of the discrete flow of ``anchor`` in direction ``v``.

    The flow is replayed step by step from the RNG keys and the linearised
    recursion ``D <- D + J_drift(X) D + (sigma'(X) D) dW`` is integrated with
    the same increments. ``J_drift`` is the Jacobian of the scheme's drift
    increment, so for Euler-Maruyama it is ``mu'(X) dt``.
    """
    if ensemble.grid is None:
        raise ConfigurationError("ensemble carries no grid; cannot replay")
    v = np.atleast_1d(np.asarray(v, dtype=float))
    parts = _run_chunks(lambda paths: _variational_chunk(model, ensemble, anchor, v, paths),
                        ensemble.n_paths, n_threads)
    return DerivativeEnsemble(
        anchor=anchor, v=v, y=None, mode="variational",
        anchor_s=float(ensemble.anchor_s[anchor]), anchor_x=ensemble.anchor_x[anchor].copy(),
        record_times=ensemble.record_times.copy(), values=np.concatenate(parts, axis=0),
        exited=ensemble.exited[anchor].copy(),
    )


def _direction_index(ensemble: PathEnsemble, v) -> int:
    if isinstance(v, (int, np.integer)):
        return int(v)
    v = np.atleast_1d(np.asarray(v, dtype=float))
    for j, (w, _) in enumerate(ensemble.grid.directions):
        if w.shape == v.shape and np.allclose(w, v, rtol=0, atol=1e-15):
            return j
    raise ConfigurationError(f"direction {v.tolist()} was not simulated")


def difference_quotient(ensemble: PathEnsemble, anchor: int, v, y: float) -> DerivativeEnsemble:
    """``(X^{x+yv} - X^x) / y`` per path and record time."""
    if ensemble.grid is None:
        raise ConfigurationError("ensemble carries no grid")
    j = _direction_index(ensemble, v)
    ys = ensemble.grid.directions[j][1]
    matches = [l for l, val in enumerate(ys) if math.isclose(val, y, rel_tol=1e-12, abs_tol=0.0)]
    if not matches:
        raise ConfigurationError(f"perturbation y={y!r} not simulated for direction {j}")
    pert = ensemble.anchor_index(anchor, j, matches[0])
    vals = (ensemble.states[pert] - ensemble.states[anchor]) / ys[matches[0]]
    return DerivativeEnsemble(
        anchor=anchor, v=ensemble.grid.directions[j][0].copy(), y=float(ys[matches[0]]), mode="quotient",
        anchor_s=float(ensemble.anchor_s[anchor]), anchor_x=ensemble.anchor_x[anchor].copy(),
        record_times=ensemble.record_times.copy(), values=vals,
        exited=ensemble.exited[anchor] | ensemble.exited[pert],
    )
