"""Cramer-Rao bound and the Monte Carlo error statistics.

The bound uses the Gaussian delay model t = t_true(u, v) + n, n ~ N(0, Q_n),
with parameters [u; v]: FIM = J^T Q_n^-1 J where J is the delay Jacobian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CrlbResult",
    "EmpiricalCdf",
    "ErrorStats",
    "cdf",
    "crlb",
    "delay_jacobian",
    "error_stats",
    "logmsed",
    "mse",
]


def delay_jacobian(u, v, c, sensors) -> np.ndarray:
    """M x 2p matrix of d t_i / d[u; v] for the closed-form delay.

    With D = c^2 - v.v and d_i = |u - s_i|::

        dt_i/du = (2 v + 2 c (u - s_i) / d_i) / D
        dt_i/dv = (2 (u - s_i) + 2 t_i v) / D
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    sensors = np.asarray(sensors, dtype=float)
    D = c * c - v @ v
    if not D > 0:
        raise ValueError("speed must satisfy |v| < c")
    r = u - sensors
    d = np.linalg.norm(r, axis=1)
    if np.any(d == 0):
        raise ValueError("delay Jacobian undefined: u coincides with a sensor")
    t = (2.0 * r @ v + 2.0 * c * d) / D
    Ju = (2.0 * v[None, :] + 2.0 * c * r / d[:, None]) / D
    Jv = (2.0 * r + 2.0 * t[:, None] * v[None, :]) / D
    return np.hstack([Ju, Jv])


@dataclass(frozen=True)
class CrlbResult:
    fim: np.ndarray
    crlb_u: float
    crlb_v: float

    @property
    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.fim)


def crlb(u, v, c, sensors, Q_n) -> CrlbResult:
    """Bound on E|u_hat - u|^2 and E|v_hat - v|^2 for unbiased estimators."""
    J = delay_jacobian(u, v, c, sensors)
    Q_n = np.asarray(Q_n, dtype=float)
    if Q_n.ndim == 0:
        Q_n = float(Q_n) * np.eye(J.shape[0])
    try:
        fim = J.T @ np.linalg.solve(Q_n, J)
    except np.linalg.LinAlgError:
        raise ValueError("noise covariance is singular") from None
    fim = 0.5 * (fim + fim.T)
    if np.linalg.cond(fim) > 1e15:
        raise ValueError("Fisher information is singular: degenerate geometry")
    cov = np.linalg.inv(fim)
    p = J.shape[1] // 2
    return CrlbResult(fim, float(np.trace(cov[:p, :p])), float(np.trace(cov[p:, p:])))


@dataclass(frozen=True)
class EmpiricalCdf:
    """Sorted sample with the right-continuous empirical CDF."""

    values: np.ndarray

    @property
    def levels(self) -> np.ndarray:
        K = len(self.values)
        return np.arange(1, K + 1) / K

    def __call__(self, x) -> float:
        return float(np.searchsorted(self.values, x, side="right") / len(self.values))

    def quantile(self, q: float) -> float:
        """Nearest rank: the ceil(q K)-th smallest value (q = 0 gives the minimum)."""
        if not 0 <= q <= 1:
            raise ValueError("quantile level must lie in [0, 1]")
        K = len(self.values)
        rank = max(1, math.ceil(round(q * K, 9)))
        return float(self.values[rank - 1])


def cdf(errors) -> EmpiricalCdf:
    e = np.sort(np.asarray(errors, dtype=float).ravel())
    if e.size == 0:
        raise ValueError("cdf of an empty error list")
    e.flags.writeable = False
    return EmpiricalCdf(e)


@dataclass(frozen=True)
class ErrorStats:
    K: int
    mse_u: float
    mse_v: float
    cdf: EmpiricalCdf
    logmsed_u: float | None = None
    logmsed_v: float | None = None

    @property
    def rmse_u(self) -> float:
        return math.sqrt(self.mse_u)

    @property
    def rmse_v(self) -> float:
        return math.sqrt(self.mse_v)


def mse(estimates, truth) -> ErrorStats:
    """Mean squared position and velocity errors over K runs.

    ``estimates`` is a sequence of (u_hat, v_hat) pairs and ``truth`` the
    pair (u, v). ``cdf`` holds the per-run position error magnitudes.
    """
    estimates = list(estimates)
    if not estimates:
        raise ValueError("mse of an empty estimate list")
    u0 = np.asarray(truth[0], dtype=float)
    v0 = np.asarray(truth[1], dtype=float)
    eu = np.array([np.sum((np.asarray(u, dtype=float) - u0) ** 2) for u, _ in estimates])
    ev = np.array([np.sum((np.asarray(v, dtype=float) - v0) ** 2) for _, v in estimates])
    return ErrorStats(len(estimates), float(np.mean(eu)), float(np.mean(ev)), cdf(np.sqrt(eu)))


def error_stats(estimates, truth, reference: ErrorStats | None = None) -> ErrorStats:
    """:func:`mse` plus LOGMSED against ``reference`` (typically RSDP)."""
    s = mse(estimates, truth)
    if reference is None:
        return s
    return ErrorStats(
        s.K, s.mse_u, s.mse_v, s.cdf,
        logmsed(s.mse_u, reference.mse_u), logmsed(s.mse_v, reference.mse_v),
    )


def logmsed(mse_pf: float, mse_r: float) -> float:
    """10 log10(mse_pf) - 10 log10(mse_r), in dB."""
    if not (mse_pf > 0 and mse_r > 0):
        raise ValueError("logmsed needs positive MSE values")
    return 10.0 * math.log10(mse_pf) - 10.0 * math.log10(mse_r)
