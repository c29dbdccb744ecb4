"""Independent closed forms for the Euler-Maruyama OU chain X_{k+1} = (1 - dt) X_k + dW_k."""

import math

import numpy as np


def ou_euler_mean(x, dt, k):
    return x * (1.0 - dt) ** k


def ou_euler_var(dt, k):
    c = (1.0 - dt) ** 2
    return dt * (1.0 - c ** k) / (1.0 - c)


def ou_euler_cov(dt, steps):
    """Covariance of (X_{k_1}, ..., X_{k_n}) started from a point at step 0."""
    steps = np.asarray(steps)
    lo = np.minimum.outer(steps, steps)
    lag = np.abs(np.subtract.outer(steps, steps))
    var = np.vectorize(lambda k: ou_euler_var(dt, int(k)))(lo)
    return (1.0 - dt) ** lag * var


def gaussian_exp_quadratic(mean, cov, A):
    """E exp(Z^T A Z) for Z ~ N(mean, cov), A symmetric (finite when I - 2 A cov is positive)."""
    mean = np.atleast_1d(mean)
    cov = np.atleast_2d(cov)
    A = np.atleast_2d(A)
    M = np.eye(len(mean)) - 2.0 * A @ cov
    sign, logdet = np.linalg.slogdet(M)
    if sign <= 0:
        return math.inf
    return math.exp(-0.5 * logdet + mean @ np.linalg.solve(M, A @ mean))


def gaussian_moment4(m, v):
    return m ** 4 + 6 * m * m * v + 3 * v * v
