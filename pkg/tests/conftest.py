import math

import numpy as np
import pytest

from flowlab.model import ModelSpec, quadratic_lyapunov, zero_lyapunov


def linear_model(A, S=None, dsig=None, **kw):
    """dX = A X dt + S dW with constant (or user) diffusion; no Lyapunov data by default."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    S = np.eye(d) if S is None else np.atleast_2d(np.asarray(S, dtype=float))
    m = S.shape[1]
    dsig = np.zeros((d, m, d)) if dsig is None else dsig
    args = dict(
        dim_state=d, dim_noise=m, horizon=1.0,
        drift=lambda x: np.einsum("ij,...j->...i", A, np.asarray(x, dtype=float)),
        diffusion=lambda x: np.broadcast_to(S, np.shape(x)[:-1] + S.shape),
        drift_jacobian=lambda x: np.broadcast_to(A, np.shape(x)[:-1] + A.shape),
        diffusion_jacobian=lambda x: np.broadcast_to(dsig, np.shape(x)[:-1] + dsig.shape),
        lyapunov_V0=zero_lyapunov(d), lyapunov_V1=zero_lyapunov(d),
        phi=0.0, p_exp=2.0, q_exp=math.inf, q0=math.inf, q1=math.inf,
        delta=0.5, gamma=1.0, c1=2.0, c2=2.0, c3=2.0,
    )
    args.update(kw)
    return ModelSpec(**args)


def scalar_model(drift, dridt, sigma, dsigma, **kw):
    """One-dimensional model from scalar callables."""
    args = dict(
        dim_state=1, dim_noise=1, horizon=1.0,
        drift=lambda x: drift(np.asarray(x, dtype=float)),
        diffusion=lambda x: sigma(np.asarray(x, dtype=float))[..., None],
        drift_jacobian=lambda x: dridt(np.asarray(x, dtype=float))[..., None],
        diffusion_jacobian=lambda x: dsigma(np.asarray(x, dtype=float))[..., None, None],
        lyapunov_V0=zero_lyapunov(1), lyapunov_V1=zero_lyapunov(1),
        phi=0.0, p_exp=2.0, q_exp=math.inf, q0=math.inf, q1=math.inf,
        delta=0.5, gamma=1.0, c1=2.0, c2=2.0, c3=2.0,
    )
    args.update(kw)
    return ModelSpec(**args)


@pytest.fixture
def zero_model():
    return linear_model(np.zeros((1, 1)), S=np.zeros((1, 1)))


__all__ = ["linear_model", "scalar_model", "quadratic_lyapunov"]


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)
